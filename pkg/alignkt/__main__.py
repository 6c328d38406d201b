from alignkt.cli import main

main()
