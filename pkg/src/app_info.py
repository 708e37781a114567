APP_NAME = "Residual Lens Harness"
APP_SLUG = "lens-harness"
VERSION = "1.0.0"
