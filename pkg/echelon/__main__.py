from echelon.cli import main

raise SystemExit(main())
