"""Error taxonomy shared across the package.

InputError marks problems with user-supplied inputs (bad config keys, missing
columns, malformed files); everything else that escapes is a runtime failure.
The CLI maps the two cases to different exit codes.
"""


class InputError(ValueError):
    pass
