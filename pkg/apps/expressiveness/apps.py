from django.apps import AppConfig


class ExpressivenessConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.expressiveness'
    verbose_name = 'Adapter expressiveness checks'
