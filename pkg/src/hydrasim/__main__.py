from hydrasim.cli import main

raise SystemExit(main())
