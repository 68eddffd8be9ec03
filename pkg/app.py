"""
Flask application entry point for the read-only run API.

Application factory pattern; the endpoints live in blueprint modules of the
routes package and read run directories under app.config["RUNS_ROOT"].
"""

from pathlib import Path
from typing import Optional, Union

from flask import Flask, jsonify

from routes import register_blueprints
from store import RUNS_ROOT


def create_app(runs_root: Optional[Union[str, Path]] = None):
    """
    Application factory function to create and configure Flask app.

    Returns:
        Flask: Configured Flask application instance
    """
    app = Flask(__name__)
    app.config["RUNS_ROOT"] = Path(runs_root or RUNS_ROOT)

    register_blueprints(app)

    @app.errorhandler(404)
    def not_found(_error):
        return jsonify({"error": "Not found."}), 404

    return app


if __name__ == '__main__':
    app = create_app()
    app.run(debug=True, host='127.0.0.1', port=5000)
