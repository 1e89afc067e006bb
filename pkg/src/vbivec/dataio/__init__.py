"""Binary and text file formats plus dataset manifests."""
