"""
Experiment Config Forms
One form per subcommand. Values arrive as text from INI sections and CLI flags,
are validated here, and ``resolved()`` gives the canonical config echoed into
every output.
"""

from django import forms
from django.conf import settings

from apps.adapters.params import ScaleRule
from apps.conflictbench.latency import DEFAULT_VARIANTS, MIN_REPS
from apps.conflictbench.training import Objective
from apps.conflictbench.variants import BASE_VARIANTS, VCE_SUFFIX, Matching

TRUE_WORDS = {'1', 'true', 'yes', 'on'}
FALSE_WORDS = {'0', 'false', 'no', 'off', ''}


def _defaults() -> dict:
    return settings.DUALLORA_DEFAULTS


class FlagField(forms.Field):
    """Boolean from true/false, yes/no, on/off or 1/0"""

    def to_python(self, value):
        if isinstance(value, bool):
            return value
        word = str(value or '').strip().lower()
        if word in TRUE_WORDS:
            return True
        if word in FALSE_WORDS:
            return False
        raise forms.ValidationError(f"'{value}' is not a boolean")


class IntegerListField(forms.Field):
    """Comma-separated integers"""

    def to_python(self, value):
        if isinstance(value, (list, tuple)):
            return [int(v) for v in value]
        try:
            return [int(part) for part in str(value).split(',') if part.strip()]
        except ValueError:
            raise forms.ValidationError(f"'{value}' is not a comma-separated list of integers")


class NameListField(forms.Field):
    """Comma-separated names"""

    def to_python(self, value):
        if isinstance(value, (list, tuple)):
            return [str(v) for v in value]
        return [part.strip() for part in str(value or '').split(',') if part.strip()]


def _as_text(value) -> str:
    if isinstance(value, (list, tuple)):
        return ','.join(str(v) for v in value)
    if value is None:
        return ''
    return str(value)


class ExperimentConfigForm(forms.Form):
    """Base form: rejects keys it does not declare"""

    section = None

    seed = forms.IntegerField(initial=0, min_value=0)

    def __init__(self, data=None, *args, **kwargs):
        self.unknown_keys = sorted(set(data or {}) - set(self.base_fields))
        super().__init__(data, *args, **kwargs)

    @classmethod
    def defaults(cls) -> dict:
        return {name: field.initial for name, field in cls.base_fields.items()}

    @classmethod
    def bind(cls, file_values: dict = None, overrides: dict = None) -> 'ExperimentConfigForm':
        """Defaults, then config file values, then CLI overrides (None means not given)"""
        data = {name: _as_text(value) for name, value in cls.defaults().items()}
        data.update({key: _as_text(value) for key, value in (file_values or {}).items()})
        data.update({key: _as_text(value) for key, value in (overrides or {}).items() if value is not None})
        return cls(data=data)

    def clean(self):
        cleaned_data = super().clean()
        if self.unknown_keys:
            raise forms.ValidationError(
                f"Unknown key(s) for [{self.section}]: {', '.join(self.unknown_keys)}"
            )
        return cleaned_data

    def resolved(self) -> dict:
        """Validated values in key order, JSON-ready"""
        return {key: self.cleaned_data[key] for key in sorted(self.cleaned_data)}


class VerifyConfigForm(ExperimentConfigForm):
    section = 'verify'

    SUITE_CHOICES = [(name, name) for name in ('grad', 'prop1', 'cor1', 'cor2', 'vce', 'routed', 'all')]

    suite = forms.ChoiceField(choices=SUITE_CHOICES, initial='all')
    instances = forms.IntegerField(initial=20, min_value=1, help_text='Seeded instances per algebraic check')
    grad_instances = forms.IntegerField(initial=10, min_value=1)
    k = forms.IntegerField(initial=3, min_value=1, help_text='Rank-1 terms summed by the prop1 check')
    d = forms.IntegerField(initial=8, min_value=1, help_text='Input and output width of the prop1 check')
    cor1_d = forms.IntegerField(initial=16, min_value=1)
    cor2_ranks = IntegerListField(initial=[2, 1])
    cor2_budget = forms.IntegerField(initial=4, min_value=1)
    routed_seeds = IntegerListField(initial=[0, 1, 2, 3, 4])
    routed_steps = forms.IntegerField(initial=5000, min_value=1)
    routed_lr = forms.FloatField(initial=0.05, min_value=0.0)

    def clean(self):
        cleaned_data = super().clean()
        k, d = cleaned_data.get('k'), cleaned_data.get('d')
        if k and d and k > d:
            raise forms.ValidationError(f"k={k} must not exceed d={d}")
        return cleaned_data


class BenchConfigForm(ExperimentConfigForm):
    section = 'bench'

    variants = NameListField(initial=list(DEFAULT_VARIANTS))
    d = forms.IntegerField(initial=1024, min_value=1)
    total_rank = forms.IntegerField(initial=_defaults()['total_rank'], min_value=1)
    reps = forms.IntegerField(initial=1000, min_value=MIN_REPS)
    warmup = forms.IntegerField(initial=50, min_value=0)
    tokens = forms.IntegerField(initial=1, min_value=1)
    inner = forms.IntegerField(initial=5, min_value=1, help_text='Forwards timed per raw sample')
    max_cv = forms.FloatField(initial=0.10, min_value=0.0)
    vce_levels = forms.IntegerField(initial=_defaults()['vce_levels'], min_value=1)
    vce_heads = forms.IntegerField(initial=_defaults()['vce_heads'], min_value=1)
    vce_points = forms.IntegerField(initial=_defaults()['vce_points'], min_value=1)
    vce_channels = forms.IntegerField(initial=_defaults()['vce_channels'], min_value=1)
    vce_grid = IntegerListField(initial=[4, 4])
    assert_ordering = FlagField(initial=False, required=False)

    def clean_variants(self):
        names = self.cleaned_data['variants']
        for name in names:
            base = name[:-len(VCE_SUFFIX)] if name.endswith(VCE_SUFFIX) else name
            if base not in BASE_VARIANTS:
                raise forms.ValidationError(f"Unknown variant '{name}'")
        if 'lora' not in names:
            raise forms.ValidationError("The variant list needs the 'lora' baseline")
        return names


class TrainConflictConfigForm(ExperimentConfigForm):
    section = 'train_conflict'

    MATCHING_CHOICES = [(name, name) for name in Matching.CHOICES]
    OBJECTIVE_CHOICES = [(name, name) for name in Objective.CHOICES]
    SCALE_CHOICES = [(rule.value, rule.value) for rule in ScaleRule]

    variants = NameListField(initial=['lora', 'dual_lora'])
    seeds = IntegerListField(initial=[0])
    conflict = forms.FloatField(initial=1.0, min_value=0.0, max_value=1.0)
    num_tasks = forms.IntegerField(initial=2, min_value=1)
    samples = forms.IntegerField(initial=512, min_value=2)
    eval_fraction = forms.FloatField(initial=0.25, min_value=0.0, max_value=0.9)
    stage1_steps = forms.IntegerField(initial=200, min_value=0)
    stage2_steps = forms.IntegerField(initial=2000, min_value=0)
    lr = forms.FloatField(initial=0.05, min_value=0.0)
    batch_size = forms.IntegerField(initial=16, min_value=1)
    total_rank = forms.IntegerField(initial=_defaults()['total_rank'], min_value=1)
    alpha = forms.FloatField(initial=_defaults()['alpha'], required=False, min_value=0.0)
    dropout = forms.FloatField(initial=_defaults()['dropout'], min_value=0.0, max_value=0.99)
    scale_rule = forms.ChoiceField(choices=SCALE_CHOICES, initial=_defaults()['scale_rule'])
    matching = forms.ChoiceField(choices=MATCHING_CHOICES, initial=Matching.RANK)
    objective = forms.ChoiceField(choices=OBJECTIVE_CHOICES, initial=Objective.MSE)
    stage2_train_projector = FlagField(initial=True, required=False)
    d_model = forms.IntegerField(initial=64, min_value=2)
    blocks = forms.IntegerField(initial=2, min_value=1)
    log_every = forms.IntegerField(initial=50, min_value=1)
    workers = forms.IntegerField(initial=1, min_value=1)
    save_checkpoints = FlagField(initial=True, required=False)

    def clean_variants(self):
        names = self.cleaned_data['variants']
        if not names:
            raise forms.ValidationError("Give at least one variant")
        for name in names:
            base = name[:-len(VCE_SUFFIX)] if name.endswith(VCE_SUFFIX) else name
            if base not in BASE_VARIANTS:
                raise forms.ValidationError(f"Unknown variant '{name}'")
        return names

    def clean_seeds(self):
        seeds = self.cleaned_data['seeds']
        if not seeds:
            raise forms.ValidationError("Give at least one seed")
        return seeds


class VceDemoConfigForm(ExperimentConfigForm):
    section = 'vce_demo'

    height = forms.IntegerField(initial=8, min_value=2)
    width = forms.IntegerField(initial=8, min_value=2)
    patch = IntegerListField(initial=[2, 3])
    patch_size = forms.IntegerField(initial=2, min_value=1)
    levels = forms.IntegerField(initial=_defaults()['vce_levels'], min_value=1)
    heads = forms.IntegerField(initial=_defaults()['vce_heads'], min_value=1)
    points = forms.IntegerField(initial=_defaults()['vce_points'], min_value=1)
    channels = forms.IntegerField(initial=_defaults()['vce_channels'], min_value=1)
    gamma = forms.FloatField(initial=_defaults()['gamma'], min_value=0.0)
    intensity = forms.FloatField(initial=3.0)
    noise = forms.FloatField(initial=0.1, min_value=0.0)
    cue_strength = forms.FloatField(initial=2.0)
    steps = forms.IntegerField(initial=200, min_value=0)
    lr = forms.FloatField(initial=0.5, min_value=0.0)
    zero_output = FlagField(initial=True, required=False)

    def clean_patch(self):
        patch = self.cleaned_data['patch']
        if len(patch) != 2:
            raise forms.ValidationError("patch is a row,col pair")
        return patch


class EntropyConfigForm(ExperimentConfigForm):
    section = 'entropy'

    checkpoint = forms.CharField(initial='', required=False,
                                 help_text='Defaults to the dual_lora checkpoint of train_conflict for this seed')
    fresh = FlagField(initial=False, required=False, help_text='Analyse an untrained Dual-LoRA model')
    bins = forms.IntegerField(initial=_defaults()['entropy_bins'], min_value=1)
    probes = forms.IntegerField(initial=256, min_value=1)
    conflict = forms.FloatField(initial=1.0, min_value=0.0, max_value=1.0)


class ParamTableConfigForm(ExperimentConfigForm):
    section = 'param_table'

    d_in = forms.IntegerField(initial=4096, min_value=1)
    d_out = forms.IntegerField(initial=4096, min_value=1)
    ranks = IntegerListField(initial=[32, 64, 128])
    include_vce = FlagField(initial=True, required=False)
    vce_levels = forms.IntegerField(initial=_defaults()['vce_levels'], min_value=1)
    vce_heads = forms.IntegerField(initial=_defaults()['vce_heads'], min_value=1)
    vce_points = forms.IntegerField(initial=_defaults()['vce_points'], min_value=1)
    vce_channels = forms.IntegerField(initial=_defaults()['vce_channels'], min_value=1)
    bytes_per_param = forms.IntegerField(initial=2, min_value=1)
