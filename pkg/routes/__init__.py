"""
Routes Package - Initialize all route blueprints
"""

from .runs_routes import runs_bp
from .noiselab_routes import noiselab_bp

def register_blueprints(app):
    """Register all route blueprints with the Flask app."""
    app.register_blueprint(runs_bp)
    app.register_blueprint(noiselab_bp)
