"""
Django management command to run the numerical verification suites
Usage: python manage.py verify [grad|prop1|cor1|cor2|vce|routed|all] [--k 3 --d 8 --seed 0]
"""

from apps.experiments.command_base import ExperimentCommand
from apps.experiments.forms import VerifyConfigForm
from apps.experiments.verification_service import SUITES, VerificationService


class Command(ExperimentCommand):
    help = 'Run gradient, rank-composition and VCE verification suites'
    form_class = VerifyConfigForm
    positional = ('suite',)

    def handle(self, *args, **options):
        suite = options.get('suite')
        if suite is not None and suite not in SUITES:
            self.usage_error(f"Unknown suite '{suite}'; choose one of {', '.join(SUITES)}")
        resolved = self.resolve(options)

        self.banner(f"Verification suite: {resolved['suite']}")
        records = VerificationService(resolved).run(resolved['suite'])

        report = self.report_service(resolved, options)
        report.jsonl('report.jsonl', records)
        report.csv(
            'checks.csv',
            ['suite', 'check', 'error', 'tolerance', 'passed'],
            ([r['suite'], r['check'], repr(r['error']), repr(r['tolerance']), r['passed']] for r in records),
        )
        report.finish()

        failed = [r for r in records if not r['passed']]
        for record in records:
            marker = self.style.SUCCESS('✓') if record['passed'] else self.style.ERROR('✗')
            self.stdout.write(
                f"  {marker} {record['suite']}/{record['check']}: "
                f"error {record['error']:.3e} (tolerance {record['tolerance']:.1e})"
            )
        if failed:
            self.fail(f"{len(failed)} of {len(records)} checks failed")
        self.stdout.write(self.style.SUCCESS(f'\n✓ All {len(records)} checks passed'))
