"""
Plot Commands for AMOC Lab
Handles SVG figure emission from reports, metrics and embedding files
"""

from src.services.plot_service import PlotKind, emit_plots


def run_plot(args):
    """Render an SVG from report, metrics, sweep or embedding files"""
    path = emit_plots(args.reports, args.kind, args.out)
    print(path)
    return 0


def register(subparsers):
    parser = subparsers.add_parser('plot', help=run_plot.__doc__)
    parser.add_argument('kind', choices=[k.value for k in PlotKind])
    parser.add_argument('reports', nargs='*')
    parser.add_argument('--out', default='plots', help='.svg file or output directory')
    parser.set_defaults(handler=run_plot)
