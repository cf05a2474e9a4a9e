"""Desk-scale camera-trap data pipeline.

Ingests field media from SD cards into dated session folders, runs a
pluggable animal detector over them, groups detections into ecological
events, exports Timelapse-compatible label tables, archives sessions to a
remote store, and scores detector output against human labels.
"""

__version__ = "0.1.0"
