from sdaserve.harness.cli import main

raise SystemExit(main())
