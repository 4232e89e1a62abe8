# -*- coding: utf-8 -*-
"""
    Command-line blueprints. They register no routes; each contributes
    top-level ``flask`` commands.
"""
