from alam._entry import main

raise SystemExit(main())
