"""Tiny staging CLI used inside generated job scripts.

Job bodies run under ``/bin/sh`` on the (simulated) cluster side, so they
move files with ``python -m opflow.stagetool {download|upload} <root> <key>
<path>`` instead of importing the storage client themselves.  Download merges
into the target directory (the job's live cwd) rather than replacing it.
"""

from __future__ import annotations

import sys

from .storage import FilesystemStorage, merge_download


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 4 or argv[0] not in ("download", "upload"):
        print("usage: opflow.stagetool {download|upload} <root> <key> <path>", file=sys.stderr)
        return 2
    action, root, key, path = argv
    client = FilesystemStorage(root)
    if action == "download":
        merge_download(client, key, path)
    else:
        client.upload(path, key)
    return 0


if __name__ == "__main__":
    sys.exit(main())
