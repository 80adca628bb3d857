"""Two-stage hand/object detector with side, state, and offset heads.

Importing this package pulls in only the lightweight detection types and
target encoding. The trainable model lives in ``handcontact.detector.model``
and is imported lazily by callers that need it.
"""
from .targets import OffsetTarget, encode_offset
from .types import HandDetection, ObjectDetection

__all__ = ["HandDetection", "ObjectDetection", "OffsetTarget", "encode_offset"]
