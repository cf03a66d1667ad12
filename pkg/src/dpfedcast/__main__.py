from dpfedcast.cli import main

main()
