# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
image-debate

Two-agent review/refine debates for image-analysis tasks: a responder
analyzes, a reviewer agrees or critiques, and the harnesses score the
outcome. A classical particle counter supplies ground truth for the
counting experiment.
"""

__version__ = "0.1.0"
__author__ = "Harrold Holdings GmbH"

from .backends import BackendSpec, ChatBackend, HttpChatBackend, ScriptedBackend, build_backend, load_script  # noqa: F401, E402
from .chat import Message, Transcript, Verdict, VerdictValue, detect_verdict  # noqa: F401, E402
from .debate import DebateConfig, DebateOutcome, DebateStatus, run_debate  # noqa: F401, E402
from .prompting import FinalObjective, PromptTemplateSet, SystemPromptFlags, build_system_prompt  # noqa: F401, E402

# Image-processing imports (optional - numpy/Pillow may be absent in debate-only installs)
try:
    from .particle_oracle import ParticleOptions, calibrate, count_particles, otsu_threshold  # noqa: F401
except ImportError:
    pass
