from django.apps import AppConfig


class RawspeechAppConfig(AppConfig):
    name = 'rawspeech_app'
