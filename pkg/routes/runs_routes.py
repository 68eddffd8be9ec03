"""
Run Routes - JSON endpoints over stored run directories
"""

from flask import Blueprint, current_app, jsonify

from run_service import get_iteration_detail, get_ledger, get_run_standings, list_runs

runs_bp = Blueprint('runs', __name__, url_prefix='/api/runs')


def _respond(result):
    ok, payload = result
    if not ok:
        return jsonify({'error': payload}), 404
    return jsonify(payload)


@runs_bp.route('')
def runs_index():
    """Run directories under the configured runs root."""
    runs = list_runs(current_app.config['RUNS_ROOT'])
    return jsonify({'runs': runs, 'count': len(runs)})


@runs_bp.route('/<run_id>/standings')
def run_standings(run_id):
    """Agents ordered by rating, clones flagged, plus the best agent."""
    return _respond(get_run_standings(current_app.config['RUNS_ROOT'], run_id))


@runs_bp.route('/<run_id>/iterations/<int:index>')
def iteration_detail(run_id, index):
    return _respond(get_iteration_detail(current_app.config['RUNS_ROOT'], run_id, index))


@runs_bp.route('/<run_id>/ledger')
def run_ledger(run_id):
    return _respond(get_ledger(current_app.config['RUNS_ROOT'], run_id))
