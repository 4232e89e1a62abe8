# -*- coding: utf-8 -*-
"""
    Read-only JSON view of a results directory.
"""
from flask import Blueprint
from flask_cors import CORS

api_v1 = Blueprint('api_v1', __name__)

CORS(api_v1)

from stabprune.apis.v1 import resources  # noqa: E402,F401
