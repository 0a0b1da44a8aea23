# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
image-debate - Test Suite

Unit tests per module plus end-to-end CLI runs over scripted backends.
"""
