from rest_framework import serializers

from rawspeech_app.constants import PoolMode
from rawspeech_app.evaluation import EvalReport, FoldResult, ReportRow
from rawspeech_app.exceptions import ConfigError
from rawspeech_app.metrics import ConfusionMatrix
from rawspeech_app.model import ModelConfig, parse_block_spec


class CommaListField(serializers.ListField):
    '''
    List field that also accepts the config-file form `a, b, c`
    '''
    def to_internal_value(self, data):
        if isinstance(data, str):
            data = [item.strip() for item in data.split(',') if item.strip()]
        return super().to_internal_value(data)


class _PositiveMixin:
    '''
    Shared checks for strictly positive real settings
    '''
    POSITIVE_FIELDS: tuple[str, ...] = ()

    def validate(self, attrs):
        for name in self.POSITIVE_FIELDS:
            if name in attrs and attrs[name] <= 0:
                raise serializers.ValidationError({name: 'Must be greater than 0.'})
        return attrs


# === CONFIG SECTIONS ===

class RunSectionSerializer(_PositiveMixin, serializers.Serializer):
    POSITIVE_FIELDS = ('learning_rate', 'grad_clip')

    seed = serializers.IntegerField(min_value=0)
    jobs = serializers.IntegerField(min_value=1)
    repeats = serializers.IntegerField(min_value=1)
    out_dir = serializers.CharField(allow_blank=False)
    desk_scale = serializers.BooleanField()
    learning_rate = serializers.FloatField()
    batch_size = serializers.IntegerField(min_value=2)
    max_epochs = serializers.IntegerField(min_value=1)
    halve_patience = serializers.IntegerField(min_value=1)
    stop_patience = serializers.IntegerField(min_value=1)
    grad_clip = serializers.FloatField()
    sweep_lengths = CommaListField(child=serializers.FloatField(), allow_empty=False)

    def validate_sweep_lengths(self, value):
        if any(length <= 0 for length in value):
            raise serializers.ValidationError('Sweep lengths must be positive.')
        return value


class CorpusSectionSerializer(_PositiveMixin, serializers.Serializer):
    POSITIVE_FIELDS = ('trim_frame_ms',)

    manifest = serializers.CharField(allow_blank=False)
    augment = serializers.BooleanField()
    speed_factors = CommaListField(child=serializers.FloatField(), allow_empty=True)
    trim_threshold_db = serializers.FloatField(max_value=-1e-9)
    trim_frame_ms = serializers.FloatField()

    def validate_speed_factors(self, value):
        if any(factor <= 0 for factor in value):
            raise serializers.ValidationError('Speed factors must be positive.')
        return value

    def validate(self, attrs):
        attrs = super().validate(attrs)
        if attrs.get('augment') and not attrs.get('speed_factors'):
            raise serializers.ValidationError({'speed_factors': 'Required when augment is on.'})
        return attrs


class ModelSectionSerializer(serializers.Serializer):
    sample_rate = serializers.IntegerField(min_value=1)
    input_seconds = serializers.FloatField()
    branch_widths_ms = CommaListField(child=serializers.FloatField(), allow_empty=False)
    branch_stride_ms = serializers.FloatField()
    filters_per_branch = serializers.IntegerField(min_value=1)
    pool_mode = serializers.ChoiceField(choices=PoolMode.choices)
    pooled_frames = serializers.IntegerField(min_value=1)
    block_spec = CommaListField(child=serializers.CharField(), allow_empty=True)
    n_classes = serializers.IntegerField(min_value=2)
    dropout = serializers.FloatField(min_value=0.0)
    block_width_divisor = serializers.IntegerField(min_value=1)

    def to_internal_value(self, data):
        # Choice values are stored lower-case
        if isinstance(data, dict) and isinstance(data.get('pool_mode'), str):
            data = {**data, 'pool_mode': data['pool_mode'].strip().casefold()}
        return super().to_internal_value(data)

    def validate_block_spec(self, value):
        try:
            return [layer.token for layer in parse_block_spec(value)]
        except ConfigError as exc:
            raise serializers.ValidationError(str(exc))

    # Build the config once so cross-field rules (widths vs input length, layer order) are enforced here
    def validate(self, attrs):
        fields = {key: value for key, value in attrs.items() if key != 'block_width_divisor'}
        try:
            ModelConfig(**fields)
        except ConfigError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs


class SynthSectionSerializer(_PositiveMixin, serializers.Serializer):
    POSITIVE_FIELDS = ('duration_s',)

    output_dir = serializers.CharField(allow_blank=False)
    sessions = serializers.IntegerField(min_value=1)
    utterances_per_speaker = serializers.IntegerField(min_value=1)
    duration_s = serializers.FloatField()
    sample_rate = serializers.IntegerField(min_value=1)
    noise_level = serializers.FloatField(min_value=0.0)
    silence_s = serializers.FloatField(min_value=0.0)


# === REPORTS ===

class ConfusionField(serializers.Field):
    def to_representation(self, value: ConfusionMatrix):
        return value.tolist()

    def to_internal_value(self, data):
        try:
            return ConfusionMatrix(data)
        except (TypeError, ValueError) as exc:
            raise serializers.ValidationError(f'Invalid confusion matrix: {exc}')


class FoldResultSerializer(serializers.Serializer):
    index = serializers.IntegerField(min_value=0)
    test_speaker = serializers.CharField()
    val_speaker = serializers.CharField()
    seeds = serializers.ListField(child=serializers.IntegerField())
    repeat_uars = serializers.ListField(child=serializers.FloatField(), allow_empty=False)
    mean_uar = serializers.FloatField()
    std_uar = serializers.FloatField()
    ensemble_uar = serializers.FloatField()
    confusion = ConfusionField()
    repeat_confusions = serializers.ListField(child=ConfusionField())
    best_epochs = serializers.ListField(child=serializers.IntegerField())
    epochs_run = serializers.ListField(child=serializers.IntegerField())
    missing_classes = serializers.ListField(child=serializers.CharField(), read_only=True)


class ReportRowSerializer(serializers.Serializer):
    label = serializers.CharField()
    value = serializers.FloatField(allow_null=True, required=False)
    fingerprint = serializers.CharField()
    shared_fingerprint = serializers.CharField()
    parameter_count = serializers.IntegerField(min_value=0)
    config = serializers.DictField()
    folds = FoldResultSerializer(many=True, allow_empty=False)

    # Summaries, derived from the folds on output
    mean_uar = serializers.FloatField(read_only=True)
    std_uar = serializers.FloatField(read_only=True)
    repeat_uars = serializers.ListField(child=serializers.FloatField(), read_only=True)
    repeat_std = serializers.FloatField(read_only=True)
    ensemble_uar = serializers.FloatField(read_only=True)
    pooled_uar = serializers.FloatField(read_only=True)
    pooled_confusion = ConfusionField(read_only=True)


class EvalReportSerializer(serializers.Serializer):
    axis = serializers.CharField()
    fingerprint = serializers.CharField()
    run_fingerprint = serializers.CharField(allow_blank=True, required=False)
    notes = serializers.ListField(child=serializers.CharField(), required=False)
    rows = ReportRowSerializer(many=True, allow_empty=False)

    def create(self, validated_data):
        rows = [
            ReportRow(
                label=row['label'],
                value=row.get('value'),
                fingerprint=row['fingerprint'],
                shared_fingerprint=row['shared_fingerprint'],
                parameter_count=row['parameter_count'],
                config=row['config'],
                folds=[FoldResult(**fold) for fold in row['folds']],
            )
            for row in validated_data['rows']
        ]

        return EvalReport(
            axis=validated_data['axis'],
            fingerprint=validated_data['fingerprint'],
            rows=rows,
            notes=list(validated_data.get('notes', [])),
            run_fingerprint=validated_data.get('run_fingerprint', ''),
        )
