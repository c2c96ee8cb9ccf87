# Empty file for package
