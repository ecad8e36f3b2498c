from django.apps import AppConfig


class ConflictbenchConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.conflictbench'
    verbose_name = 'Conflict benchmark'
