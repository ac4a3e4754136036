"""Builtin prompt template sets.

RESISC45 is the remote-sensing prompt set distributed with the original
CLIP release (data/prompts.md); shipped here verbatim so text extraction
works without network access.
"""

RESISC45_TEMPLATES = [
    "satellite imagery of {}.",
    "aerial imagery of {}.",
    "satellite photo of {}.",
    "aerial photo of {}.",
    "satellite view of {}.",
    "aerial view of {}.",
    "satellite imagery of a {}.",
    "aerial imagery of a {}.",
    "satellite photo of a {}.",
    "aerial photo of a {}.",
    "satellite view of a {}.",
    "aerial view of a {}.",
]

BUILTIN_TEMPLATE_SETS = {
    "resisc45": RESISC45_TEMPLATES,
}
