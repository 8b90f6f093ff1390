"""Pipeline definition model: parsing, validation, and per-job resolution.

A pipeline document is YAML with three kinds of top-level keys: ``default``
(settings applied to every job), ``stages`` (ordered list of stage names),
and one mapping per job. Parsing preserves document order and keeps job
fields unmerged; ``resolve_job`` computes the effective settings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

# Job sub-keys we understand. ``artifacts`` is an extension: a list of
# relative paths the job intends to upload.
_JOB_KEYS = {"stage", "script", "tags", "image", "variables", "artifacts"}
_DEFAULT_KEYS = {"image", "tags", "variables"}


class PipelineSyntaxError(Exception):
    """Malformed document: not parseable YAML."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        super().__init__(message)


class PipelineSchemaError(Exception):
    """Well-formed YAML whose shape does not match the pipeline dialect."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{message} [{location}]" if location else message)


@dataclass(frozen=True)
class DefaultSection:
    image: str | None = None
    tags: list[str] | None = None
    variables: dict[str, str] | None = None


@dataclass(frozen=True)
class JobDefinition:
    stage: str
    script: list[str]
    tags: list[str] | None = None  # None = key absent; [] would be a declared empty list
    image: str | None = None
    variables: dict[str, str] | None = None
    artifacts: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class PipelineDefinition:
    defaults: DefaultSection
    stages: list[str]
    jobs: dict[str, JobDefinition]
    # Warnings collected during parsing (e.g. unknown keys). Not part of
    # structural identity: round-tripping drops them.
    parse_warnings: list["ValidationIssue"] = field(default_factory=list, compare=False)


@dataclass(frozen=True)
class ResolvedJobSpec:
    """A job after merging the default section.

    - image: job image if present, else default image, else None.
    - tags: the job's tags verbatim when the job declares a ``tags`` key
      (whole-list replacement, never a union), else the default tags, else [].
    - variables: default variables overlaid by job variables (job wins).
    """

    name: str
    stage: str
    stage_index: int
    image: str | None
    tags: list[str]
    variables: dict[str, str]
    script: list[str]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "stage": self.stage,
            "stage_index": self.stage_index,
            "image": self.image,
            "tags": list(self.tags),
            "variables": dict(self.variables),
            "script": list(self.script),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ResolvedJobSpec":
        return cls(
            name=data["name"],
            stage=data["stage"],
            stage_index=data["stage_index"],
            image=data.get("image"),
            tags=list(data.get("tags", [])),
            variables=dict(data.get("variables", {})),
            script=list(data["script"]),
        )


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str
    location: str = ""


@dataclass
class ValidationReport:
    errors: list[ValidationIssue] = field(default_factory=list)
    warnings: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def error(self, code: str, message: str, location: str = "") -> None:
        self.errors.append(ValidationIssue(code, message, location))

    def warn(self, code: str, message: str, location: str = "") -> None:
        self.warnings.append(ValidationIssue(code, message, location))

    def to_dict(self) -> dict:
        return {
            "errors": [vars(i) for i in self.errors],
            "warnings": [vars(i) for i in self.warnings],
        }


# ---------------------------------------------------------------------------
# Parsing. We walk the YAML node tree (rather than safe_load) so scalar
# values keep their literal text (``2G`` and ``1`` both stay strings) and
# schema errors can point at a document line.


def _mark(node) -> str:
    return f"line {node.start_mark.line + 1}"


def _expect_str(node, what: str) -> str:
    if not isinstance(node, yaml.ScalarNode):
        raise PipelineSchemaError(f"{what} must be a string", _mark(node))
    return node.value


def _expect_str_list(node, what: str) -> list[str]:
    if not isinstance(node, yaml.SequenceNode):
        raise PipelineSchemaError(f"{what} must be a list", _mark(node))
    return [_expect_str(item, f"{what} entry") for item in node.value]


def _expect_str_map(node, what: str) -> dict[str, str]:
    if not isinstance(node, yaml.MappingNode):
        raise PipelineSchemaError(f"{what} must be a mapping", _mark(node))
    out: dict[str, str] = {}
    for key_node, value_node in node.value:
        key = _expect_str(key_node, f"{what} key")
        out[key] = _expect_str(value_node, f"{what}.{key}")
    return out


def _parse_defaults(node, warnings: list[ValidationIssue]) -> DefaultSection:
    if not isinstance(node, yaml.MappingNode):
        raise PipelineSchemaError("default section must be a mapping", _mark(node))
    image = tags = variables = None
    for key_node, value_node in node.value:
        key = _expect_str(key_node, "default key")
        if key == "image":
            image = _expect_str(value_node, "default.image")
        elif key == "tags":
            tags = _expect_str_list(value_node, "default.tags")
        elif key == "variables":
            variables = _expect_str_map(value_node, "default.variables")
        else:
            warnings.append(
                ValidationIssue("UNKNOWN_KEY", f"unknown default key '{key}'", _mark(key_node))
            )
    return DefaultSection(image=image, tags=tags, variables=variables)


def _parse_job(name: str, node, warnings: list[ValidationIssue]) -> JobDefinition:
    if not isinstance(node, yaml.MappingNode):
        raise PipelineSchemaError(f"job '{name}' must be a mapping", _mark(node))
    fields: dict = {"artifacts": []}
    for key_node, value_node in node.value:
        key = _expect_str(key_node, "job key")
        if key == "stage":
            fields["stage"] = _expect_str(value_node, f"{name}.stage")
        elif key == "script":
            fields["script"] = _expect_str_list(value_node, f"{name}.script")
        elif key == "tags":
            fields["tags"] = _expect_str_list(value_node, f"{name}.tags")
        elif key == "image":
            fields["image"] = _expect_str(value_node, f"{name}.image")
        elif key == "variables":
            fields["variables"] = _expect_str_map(value_node, f"{name}.variables")
        elif key == "artifacts":
            fields["artifacts"] = _expect_str_list(value_node, f"{name}.artifacts")
        else:
            warnings.append(
                ValidationIssue(
                    "UNKNOWN_KEY", f"unknown key '{key}' in job '{name}'", _mark(key_node)
                )
            )
    if "stage" not in fields:
        raise PipelineSchemaError(f"job '{name}' has no stage", _mark(node))
    if not fields.get("script"):
        raise PipelineSchemaError(f"job '{name}' has an empty or missing script", _mark(node))
    for command in fields["script"]:
        if not command.strip():
            raise PipelineSchemaError(f"job '{name}' has an empty script command", _mark(node))
    return JobDefinition(**fields)


def parse_pipeline(source: str) -> PipelineDefinition:
    """Parse a pipeline document into its typed model.

    Raises PipelineSyntaxError for malformed YAML, PipelineSchemaError when
    the document shape is wrong (including a job referencing a stage absent
    from the stages list). Unknown keys become warnings carried on the
    returned definition.
    """
    try:
        root = yaml.compose(source)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise PipelineSyntaxError(
            str(exc),
            line=mark.line + 1 if mark else None,
            column=mark.column + 1 if mark else None,
        ) from exc
    except yaml.YAMLError as exc:
        raise PipelineSyntaxError(str(exc)) from exc
    if root is None:
        raise PipelineSchemaError("empty document")
    if not isinstance(root, yaml.MappingNode):
        raise PipelineSchemaError("document must be a mapping", _mark(root))

    warnings: list[ValidationIssue] = []
    defaults = DefaultSection()
    stages: list[str] | None = None
    jobs: dict[str, JobDefinition] = {}

    for key_node, value_node in root.value:
        key = _expect_str(key_node, "top-level key")
        if key == "default":
            defaults = _parse_defaults(value_node, warnings)
        elif key == "stages":
            stages = _expect_str_list(value_node, "stages")
        else:
            if key in jobs:
                raise PipelineSchemaError(f"duplicate job '{key}'", _mark(key_node))
            if not key:
                raise PipelineSchemaError("empty job name", _mark(key_node))
            jobs[key] = _parse_job(key, value_node, warnings)

    if stages is None:
        raise PipelineSchemaError("missing stages list")
    if not jobs:
        raise PipelineSchemaError("pipeline defines no jobs")
    if not stages:
        # Degenerate document: no stage can ever be valid. Non-empty stage
        # lists leave membership checks to validate_pipeline.
        raise PipelineSchemaError("job references stage absent from stages list")
    return PipelineDefinition(defaults=defaults, stages=stages, jobs=jobs, parse_warnings=warnings)


def validate_pipeline(definition: PipelineDefinition) -> ValidationReport:
    """Check model invariants; a definition with errors must not execute."""
    report = ValidationReport(warnings=list(definition.parse_warnings))

    seen_stages: set[str] = set()
    for stage in definition.stages:
        if not stage:
            report.error("EMPTY_STAGE_NAME", "stage names must be nonempty", "stages")
        elif stage in seen_stages:
            report.error("DUPLICATE_STAGE", f"stage '{stage}' listed twice", "stages")
        seen_stages.add(stage)

    def check_tags(tags: list[str] | None, location: str) -> None:
        for tag in tags or []:
            if not tag or any(ch.isspace() for ch in tag):
                report.error("BAD_TAG", f"tag {tag!r} is empty or contains whitespace", location)

    check_tags(definition.defaults.tags, "default.tags")

    referenced: set[str] = set()
    for name, job in definition.jobs.items():
        if not name:
            report.error("EMPTY_JOB_NAME", "job names must be nonempty")
        if job.stage not in seen_stages:
            report.error(
                "JOB_UNKNOWN_STAGE",
                f"job '{name}' references unknown stage '{job.stage}'",
                name,
            )
        referenced.add(job.stage)
        if not job.script:
            report.error("EMPTY_SCRIPT", f"job '{name}' has no script commands", name)
        for command in job.script:
            if not command.strip():
                report.error("EMPTY_COMMAND", f"job '{name}' has an empty command", name)
        check_tags(job.tags, f"{name}.tags")

    for stage in definition.stages:
        if stage not in referenced:
            report.warn("STAGE_UNUSED", f"stage '{stage}' has no jobs", "stages")
    return report


def resolve_job(definition: PipelineDefinition, name: str) -> ResolvedJobSpec:
    """Merge the default section into one job per the override rules."""
    if name not in definition.jobs:
        raise KeyError(f"unknown job '{name}'")
    job = definition.jobs[name]
    defaults = definition.defaults

    image = job.image if job.image is not None else defaults.image
    if job.tags is not None:
        tags = list(job.tags)
    elif defaults.tags is not None:
        tags = list(defaults.tags)
    else:
        tags = []
    variables = dict(defaults.variables or {})
    variables.update(job.variables or {})

    return ResolvedJobSpec(
        name=name,
        stage=job.stage,
        stage_index=definition.stages.index(job.stage),
        image=image,
        tags=tags,
        variables=variables,
        script=list(job.script),
    )


def serialize_pipeline(definition: PipelineDefinition) -> str:
    """Render a definition back to document text (round-trip stable)."""
    doc: dict = {}
    defaults = definition.defaults
    default_block: dict = {}
    if defaults.image is not None:
        default_block["image"] = defaults.image
    if defaults.tags is not None:
        default_block["tags"] = list(defaults.tags)
    if defaults.variables is not None:
        default_block["variables"] = dict(defaults.variables)
    if default_block:
        doc["default"] = default_block
    doc["stages"] = list(definition.stages)
    for name, job in definition.jobs.items():
        block: dict = {"stage": job.stage}
        if job.tags is not None:
            block["tags"] = list(job.tags)
        if job.image is not None:
            block["image"] = job.image
        if job.variables is not None:
            block["variables"] = dict(job.variables)
        block["script"] = list(job.script)
        if job.artifacts:
            block["artifacts"] = list(job.artifacts)
        doc[name] = block
    return yaml.safe_dump(doc, sort_keys=False, default_style=None)
