# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Prompt templates for the responder/reviewer debate and the particle-counting loop.

Templates use {name} placeholders; literal braces are written {{ and }}.
Substitution is single-pass, so bound values are never re-expanded.
"""

import logging
import re
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Literal

logger = logging.getLogger("image_debate.prompting")

_PLACEHOLDER_RE = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}")

ROI_SENTENCE = "The final largest ROI is"

# System prompt sentences
COLLABORATE_ASAP = "Please collaborate with each other and try to reach an agreement as soon as possible."
COLLABORATE_FIVE_ROUNDS = "Please collaborate with each other and try to reach an agreement in 5 rounds of debate."
SUMMARIZE_CLAUSE_CONCISE = "Once the list-summarize function is called,"
SUMMARIZE_CLAUSE_VERBOSE = "Once the final objective has been achieved (after the list-summarize function is called),"
EXACT_FORMAT_ONCE = "This sentence must appear in the exact format, exactly one time at the end."
EXACT_FORMAT_PLAIN = "This sentence must appear in the exact format."
LABEL_IN_FINAL_IMAGE = "Label can be found in the final image generated."

DEFAULT_SYSTEM_BASE = (
    "You are operating a scanning electron microscope through function calls. "
    "Call take_image to acquire images, image_analysis to inspect them, and list-summarize when the task is complete."
)

DEFAULT_REVIEWER_TEMPLATE = (
    "Based on the following analysis, provide your critique or agreement: {gemini_response}. "
    "Please collaborate with each other and try to reach an agreement as soon as possible. "
    "If you agree, please explicitly state 'I agree'. "
    "If you do not agree, please explicitly state 'I do not agree' first. "
    "In brackets, state the final objective at the start of your response."
)

DEFAULT_REFINE_TEMPLATE = (
    "ChatGPT has provided the following critique: {chatgpt_response}. "
    "Please collaborate with each other and try to reach an agreement as soon as possible. "
    "If you agree, please refine your analysis. "
    "If you don't agree, please state why, and repeat your analysis."
)

DEFAULT_ROI_FORMAT_INSTRUCTION = (
    'clearly state the label (e.g., a) of the largest ROI identified in this exact format "The final largest ROI is a". '
    "Please replace 'a' with the actual result. {exact_format_sentence}"
)

DEFAULT_IMAGE_ANALYSIS_TEMPLATE = "The function image_analysis was called on image {image}. {description}\n{request}"

EXP2_ANALYST_ROUND1 = (
    "Tell me how many white particles are larger than 10 micrometers² in this photo. "
    "Use appropriate techniques to isolate the white particles and exclude irrelevant regions like the scale bar. "
    "Ensure particles at the bottom that may be intersecting are not included. "
    "Use the scale bar at the bottom for pixel to micrometer conversion and show me an annotated image that "
    "highlights the detected particles, along with the number. "
    "The detection should focus on particles over 10 micrometers² and avoid any false positives from the scale bar region."
)

EXP2_REVIEWER_META = (
    "Assume the role where you are talking to ChatGPT, so your answer needs to be directly addressed to ChatGPT. "
    "I'm going to tell you what prompt i gave ChatGPT and what it responded me with. "
    "Evaluate its answer and give it feedback so that it can improve. "
    "You can also improve the prompt to help ChatGPT give a better answer.\n\n"
    "Prompt for ChatGPT:\n\n{analyst_prompt}\n\n"
    "ChatGPT's response: {analyst_response}"
)

EXP2_ANALYST_ROUND2_PREFIX = "See the feedback below and try the analysis again:\n\n"

DEFAULT_OBJECTIVE = "take a picture of the martensite phase with HFW of 80 microns and state the label of the largest ROI when the summarize function is called"

# System-prompt additions that were tried and dropped because accuracy did not improve
REJECTED_SYSTEM_ADDITIONS: dict[str, str] = {
    "needle_hint": "Information that will be helpful: Martensite phases consist of needle-like structures.",
    "round_tracking": (
        "Keep track of which round of debate you are at, and in the last round, the largest ROI must be stated explicitly. "
        "Since there is a debate that occurs for each image analysis, you can get the final largest ROI from the last "
        "analysis provided by either ChatGPT and Gemini."
    ),
}


class PromptError(Exception):
    """Base class for prompt rendering errors."""


class MissingBinding(PromptError):
    """A template placeholder has no binding."""

    def __init__(self, name: str):
        super().__init__(f"No binding for placeholder '{name}'")
        self.name = name


class EmptyObjective(PromptError):
    """The final objective text is empty."""


@dataclass(frozen=True)
class PromptChange:
    """One row of the prompt-engineering changelog."""

    source: str
    change: str
    worked: bool
    kept: bool
    reason: str
    flag: str | None = None


PROMPT_CHANGES: list[PromptChange] = [
    PromptChange(
        "Individual",
        "Added: " + REJECTED_SYSTEM_ADDITIONS["needle_hint"],
        worked=False,
        kept=False,
        reason="Too specific to the objective under test; does not generalize.",
    ),
    PromptChange(
        "Individual",
        "Added: " + LABEL_IN_FINAL_IMAGE,
        worked=True,
        kept=True,
        reason="The final ROI identified was always visible in the final image.",
        flag="label_in_final_image",
    ),
    PromptChange(
        "Responder",
        "Added: If you don't agree, please state why, and repeat your analysis.",
        worked=True,
        kept=True,
        reason="Without it the responder sometimes disagreed without repeating its analysis, leaving nothing to review.",
    ),
    PromptChange(
        "System prompt",
        "Added: " + COLLABORATE_FIVE_ROUNDS,
        worked=True,
        kept=True,
        reason="Accuracy improved.",
        flag="collaboration_variant",
    ),
    PromptChange(
        "System prompt",
        "Added: " + REJECTED_SYSTEM_ADDITIONS["round_tracking"],
        worked=False,
        kept=False,
        reason="Accuracy worsened; tracking the round was unnecessary and confusing.",
    ),
    PromptChange(
        "System prompt",
        "Added: " + COLLABORATE_ASAP,
        worked=True,
        kept=True,
        reason="Accuracy improved to 60%.",
        flag="collaborate_asap",
    ),
    PromptChange(
        "System prompt",
        f"Replaced: {SUMMARIZE_CLAUSE_VERBOSE} With: {SUMMARIZE_CLAUSE_CONCISE}",
        worked=True,
        kept=True,
        reason="More concise, less confusing.",
        flag="concise_summarize_clause",
    ),
    PromptChange(
        "System prompt",
        f"Replaced: {EXACT_FORMAT_PLAIN} With: {EXACT_FORMAT_ONCE}",
        worked=True,
        kept=True,
        reason="More specific instructions.",
        flag="exact_format_once_at_end",
    ),
    PromptChange(
        "System prompt",
        "Append the final objective",
        worked=True,
        kept=True,
        reason="The system prompt carries more weight, so it reminds the model of the objective.",
        flag="append_final_objective",
    ),
]


@dataclass(frozen=True)
class SystemPromptFlags:
    """Toggles for the kept prompt changes. Defaults are the kept configuration."""

    collaborate_asap: bool = True
    concise_summarize_clause: bool = True
    exact_format_once_at_end: bool = True
    append_final_objective: bool = True
    label_in_final_image: bool = True
    collaboration_variant: Literal["asap", "five_rounds"] = "asap"

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "SystemPromptFlags":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (data or {}).items() if k in known})


@dataclass(frozen=True)
class FinalObjective:
    """The task the agents work towards, appended to the system prompt."""

    text: str = DEFAULT_OBJECTIVE
    hfw_microns: float | None = 80.0
    # Stored, not enforced: the range requirement conflicts with the 80 micron command
    hfw_range_microns: tuple[float, float] | None = (200.0, 600.0)

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise EmptyObjective("Final objective text must be non-empty")

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "FinalObjective":
        data = dict(data or {})
        if data.get("hfw_range_microns") is not None:
            data["hfw_range_microns"] = tuple(data["hfw_range_microns"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class PromptTemplateSet:
    """All prompt templates used by the harnesses."""

    system_base: str = DEFAULT_SYSTEM_BASE
    reviewer_template: str = DEFAULT_REVIEWER_TEMPLATE
    refine_template: str = DEFAULT_REFINE_TEMPLATE
    roi_format_instruction: str = DEFAULT_ROI_FORMAT_INSTRUCTION
    image_analysis_template: str = DEFAULT_IMAGE_ANALYSIS_TEMPLATE
    exp2_analyst_round1: str = EXP2_ANALYST_ROUND1
    exp2_reviewer_meta: str = EXP2_REVIEWER_META
    exp2_analyst_round2_prefix: str = EXP2_ANALYST_ROUND2_PREFIX
    flags: SystemPromptFlags = field(default_factory=SystemPromptFlags)

    def __post_init__(self) -> None:
        if "{gemini_response}" not in self.reviewer_template:
            raise ValueError("reviewer_template must contain {gemini_response}")
        if "{chatgpt_response}" not in self.refine_template:
            raise ValueError("refine_template must contain {chatgpt_response}")
        if ROI_SENTENCE not in self.roi_format_instruction:
            raise ValueError(f"roi_format_instruction must contain '{ROI_SENTENCE}'")

    def with_system_addition(self, name: str) -> "PromptTemplateSet":
        """
        Return a copy whose system_base carries one of the rejected additions.

        Args:
            name: Key of REJECTED_SYSTEM_ADDITIONS

        Raises:
            KeyError: If the addition is unknown
        """
        addition = REJECTED_SYSTEM_ADDITIONS[name]
        return replace(self, system_base=f"{self.system_base}\n{addition}")

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "PromptTemplateSet":
        """Build from a config mapping; unknown keys are ignored, missing keys use defaults."""
        data = dict(data or {})
        flags = SystemPromptFlags.from_dict(data.pop("flags", None))
        known = {f.name for f in fields(cls)} - {"flags"}
        templates = cls(flags=flags, **{k: v for k, v in data.items() if k in known})
        for name in data.get("system_additions", []) or []:
            templates = templates.with_system_addition(name)
        return templates


def render_template(template: str, bindings: dict[str, str]) -> str:
    """
    Substitute {name} placeholders in a single pass.

    Args:
        template: Template text
        bindings: Placeholder values

    Returns:
        Rendered text

    Raises:
        MissingBinding: If a placeholder has no binding
    """
    used: set[str] = set()

    def substitute(match: re.Match[str]) -> str:
        token = match.group(0)
        if token == "{{":
            return "{"
        if token == "}}":
            return "}"
        name = match.group(1)
        if name not in bindings:
            raise MissingBinding(name)
        used.add(name)
        return bindings[name]

    rendered = _PLACEHOLDER_RE.sub(substitute, template)

    unused = set(bindings) - used
    if unused:
        logger.warning(f"Unused template bindings: {', '.join(sorted(unused))}")

    return rendered


def build_system_prompt(flags: SystemPromptFlags, objective: FinalObjective, templates: PromptTemplateSet | None = None) -> str:
    """
    Assemble the system prompt for the experiment rounds.

    Order: base text, collaboration sentence, summarize clause with the ROI
    format instruction, label-visibility sentence, then the objective as the
    last line.

    Args:
        flags: Which prompt changes are active
        objective: Final objective
        templates: Template set supplying the base and ROI instruction

    Returns:
        System prompt text

    Raises:
        EmptyObjective: If the objective text is empty
    """
    if not objective.text or not objective.text.strip():
        raise EmptyObjective("Final objective text must be non-empty")

    templates = templates or PromptTemplateSet()
    lines = [templates.system_base]

    if flags.collaborate_asap:
        lines.append(COLLABORATE_FIVE_ROUNDS if flags.collaboration_variant == "five_rounds" else COLLABORATE_ASAP)

    summarize_clause = SUMMARIZE_CLAUSE_CONCISE if flags.concise_summarize_clause else SUMMARIZE_CLAUSE_VERBOSE
    exact_format = EXACT_FORMAT_ONCE if flags.exact_format_once_at_end else EXACT_FORMAT_PLAIN
    roi_instruction = render_template(templates.roi_format_instruction, {"exact_format_sentence": exact_format})
    lines.append(f"Very important: {summarize_clause} {roi_instruction}")

    if flags.label_in_final_image:
        lines.append(LABEL_IN_FINAL_IMAGE)

    if flags.append_final_objective:
        lines.append(objective.text)

    return "\n".join(lines)


def build_reviewer_prompt(templates: PromptTemplateSet, gemini_response: str) -> str:
    """Render the reviewer prompt around the responder's latest analysis."""
    if not gemini_response:
        logger.warning("Reviewer prompt rendered with an empty responder analysis")
    return render_template(templates.reviewer_template, {"gemini_response": gemini_response})


def build_refine_prompt(templates: PromptTemplateSet, chatgpt_response: str) -> str:
    """Render the refinement prompt around the reviewer's critique."""
    if not chatgpt_response:
        logger.warning("Refine prompt rendered with an empty critique")
    return render_template(templates.refine_template, {"chatgpt_response": chatgpt_response})


def build_image_analysis_prompt(templates: PromptTemplateSet, image: str, description: str = "", request: str = "") -> str:
    """Render the responder's request for one image_analysis call."""
    return render_template(
        templates.image_analysis_template,
        {"image": image, "description": description, "request": request},
    )


def build_exp2_reviewer_prompt(templates: PromptTemplateSet, analyst_prompt: str, analyst_response: str) -> str:
    """Render the reviewer's meta prompt for the particle-counting loop."""
    return render_template(
        templates.exp2_reviewer_meta,
        {"analyst_prompt": analyst_prompt, "analyst_response": analyst_response},
    )


def build_exp2_revision_prompt(templates: PromptTemplateSet, critique: str) -> str:
    """Prefix the reviewer's critique for the analyst's second round."""
    return templates.exp2_analyst_round2_prefix + critique
