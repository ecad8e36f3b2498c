from django.apps import AppConfig


class VceConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.vce'
    verbose_name = 'Visual cue enhancement'
