"""
Noise Lab Routes - exact selection statistics
"""

from flask import Blueprint, jsonify, request

from noiselab import DEFAULT_ACCURACIES
from run_service import exact_probabilities

noiselab_bp = Blueprint('noiselab', __name__, url_prefix='/api/noiselab')


@noiselab_bp.route('/exact')
def exact():
    """
    Tie and top-1 probabilities for one round of n tasks.
    Query: n (default 20), acc (comma-separated), mode (optional top-1 mode).
    """
    try:
        n = int(request.args.get('n', 20))
        acc_text = request.args.get('acc', '')
        accuracies = [float(x) for x in acc_text.split(',') if x.strip()] or list(DEFAULT_ACCURACIES)
    except ValueError:
        return jsonify({'error': 'n must be an integer and acc a comma-separated list of numbers.'}), 400

    ok, payload = exact_probabilities(n, accuracies, request.args.get('mode') or None)
    if not ok:
        return jsonify({'error': payload}), 400
    return jsonify(payload)
