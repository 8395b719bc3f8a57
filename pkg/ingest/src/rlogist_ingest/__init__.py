"""rlogist-ingest: adapter from raw feature-matrix dumps to rlogist bundles.

Speaks to the core package only through its published file formats (the
"RLGB" bundle layout and the JSON dataset manifest); no imaging or model
dependencies on either side of the boundary.
"""

__version__ = "0.1.0"
