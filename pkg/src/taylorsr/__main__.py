# Licensed under the GPL. See License.txt in the project root for license information.

import sys

from .runner import main

sys.exit(main())
