#!/usr/bin/env python

version_json = '''
{
 "version": "0.1.0",
 "full-revisionid": null,
 "dirty": false,
 "error": null
}
'''


def get_versions():
    import json
    return json.loads(version_json)
