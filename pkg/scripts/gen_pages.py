# ==============================================================================
#  Copyright (c) 2024 Sam Hart                                                 =
#  <contact@justsam.io>                                                        =
#                                                                              =
#  Permission is hereby granted, free of charge, to any person obtaining a     =
#  copy of this software and associated documentation files (the "Software"),  =
#  to deal in the Software without restriction, including without limitation   =
#  the rights to use, copy, modify, merge, publish, distribute, sublicense,    =
#  and/or sell copies of the Software, and to permit persons to whom the       =
#  Software is furnished to do so, subject to the following conditions:        =
#                                                                              =
#  The above copyright notice and this permission notice shall be included in  =
#  all copies or substantial portions of the Software.                         =
#                                                                              =
#  THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR  =
#  IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,    =
#  FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL     =
#  THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER  =
#  LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING     =
#  FROM, OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER         =
#  DEALINGS IN THE SOFTWARE.                                                   =
# ==============================================================================
"""Generate one API reference page per module of the `gcmt` package.

Run by the mkdocs `gen-files` plugin; follows the mkdocstrings recipe for
automatic code reference pages.
"""

from pathlib import Path

import mkdocs_gen_files

PACKAGE = "gcmt"
REFERENCE_DIR = Path("API-Reference")

for source in sorted(Path(PACKAGE).rglob("*.py")):
    module = source.relative_to(PACKAGE).with_suffix("")
    if module.name == "__main__":
        continue

    parts = (PACKAGE, *module.parts)
    page = module.with_suffix(".md")
    if module.name == "__init__":
        parts = parts[:-1]
        page = page.with_name("index.md")

    with mkdocs_gen_files.open(REFERENCE_DIR / page, "w") as fd:
        fd.write(f"::: {'.'.join(parts)}\n")
    mkdocs_gen_files.set_edit_path(REFERENCE_DIR / page, source)

