'''
Error hierarchy. Management commands map ConfigError/ManifestError to exit
code 2 and every other RawSpeechError to exit code 1.
'''


class RawSpeechError(Exception):
    pass


# === Audio ===
class AudioFileNotFoundError(RawSpeechError, FileNotFoundError):
    pass


class MalformedWavError(RawSpeechError):
    pass


class UnsupportedEncodingError(RawSpeechError):
    pass


class AudioRangeError(RawSpeechError, ValueError):
    pass


class AudioWriteError(RawSpeechError, OSError):
    pass


# === Corpus ===
class ManifestError(RawSpeechError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        prefix = f'Line {row}: ' if row is not None else ''
        super().__init__(f'{prefix}{message}')


class FoldError(RawSpeechError):
    pass


# === Tensors ===
class ShapeError(RawSpeechError, ValueError):
    def __init__(self, message: str, *shapes: tuple):
        self.shapes = shapes
        shown = ' vs '.join(str(tuple(shape)) for shape in shapes)
        super().__init__(f'{message}: {shown}' if shapes else message)


class GraphError(RawSpeechError):
    pass


class NonFiniteError(RawSpeechError, FloatingPointError):
    pass


# === Model / training ===
class ConfigError(RawSpeechError, ValueError):
    pass


class DivergenceError(RawSpeechError):
    pass
