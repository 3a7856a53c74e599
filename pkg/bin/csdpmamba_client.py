#!/usr/bin/env python

"""Runs the csdpmamba stages from the command line; see `csdpmamba --help`."""

from csdpmamba.cli import run


if __name__ == '__main__':
    run()
