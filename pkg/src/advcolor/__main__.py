import sys
sys.exit(__import__("advcolor.cli", fromlist=["main"]).main())
