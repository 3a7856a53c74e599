#!/usr/bin/env python

"""Exception hierarchy.

Every error carries the process exit code the command-line client maps it to.
"""


class CsdpError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ParseError(CsdpError, ValueError):
    """Malformed dataset file."""

    exit_code = 2

    def __init__(self, message, line_number=None, path=None):
        """Constructor.

        Args:
            message: string, what went wrong.
            line_number: int, 1-based line of the offending input, if known.
            path: string, file being parsed, if known.
        """
        self.line_number = line_number
        self.path = path
        prefix = ''
        if path is not None:
            prefix = '{}: '.format(path)
        if line_number is not None:
            prefix = '{}line {}: '.format(prefix, line_number)
        super(ParseError, self).__init__(prefix + message)


class ConfigError(CsdpError, ValueError):
    exit_code = 2


class DataError(CsdpError, ValueError):
    """Input data does not meet what an operation needs, such as a minimum length."""

    exit_code = 2


class FormatError(CsdpError, IOError):
    """Checkpoint or matrix file does not match the expected layout."""

    exit_code = 2


class ShapeError(CsdpError, ValueError):
    """Operand shapes are incompatible for a primitive."""

    exit_code = 3

    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        super(ShapeError, self).__init__('{}: incompatible shapes {}'.format(
            primitive, ', '.join(str(tuple(s)) for s in shapes)))


class NumericError(CsdpError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = 3

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = 'epoch {}: {}'.format(epoch, message)
        super(NumericError, self).__init__(message)


class GradCheckError(CsdpError):
    exit_code = 4


class LabelError(CsdpError, ValueError):
    """Labels an operation depends on are missing."""

    exit_code = 2
