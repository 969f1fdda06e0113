import re
from logging import getLogger
from pathlib import Path as LibPath
from typing import Dict, List, Mapping, Optional, Sequence

LOGGER = getLogger(__name__)

BUNDLED_PROMPT_DIR = LibPath(__file__).parent / "prompts"
PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
LANGUAGES = ("en", "zh")


class PromptError(Exception):
    pass


class UnknownTemplate(PromptError):
    def __init__(self, template_id: str, language: str = "en"):
        self.template_id = template_id
        self.language = language
        super().__init__(f"Unknown template: {template_id} ({language})")


class MissingBinding(PromptError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Missing binding: {name}")


def placeholders(template: str) -> List[str]:
    """Placeholder names in order of first appearance."""
    seen: List[str] = []
    for name in PLACEHOLDER.findall(template):
        if name not in seen:
            seen.append(name)
    return seen


def substitute(template: str, bindings: Mapping[str, str]) -> str:
    """Replace every {name} in one pass; other braces are left alone."""
    for name in placeholders(template):
        if name not in bindings:
            raise MissingBinding(name)
    return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template)


class PromptStore:
    """Plain-text templates stored as `<id>.<lang>.txt`.

    Directories are searched in order, so a user prompt directory can
    shadow the bundled templates. A missing language variant falls back to
    the English one.
    """

    def __init__(self, directories: Optional[Sequence[LibPath]] = None):
        self.directories = [LibPath(d) for d in (directories or [])]
        if BUNDLED_PROMPT_DIR not in self.directories:
            self.directories.append(BUNDLED_PROMPT_DIR)
        self._extra: Dict[str, str] = {}

    def add(self, template_id: str, text: str, language: str = "en") -> None:
        """Register an in-memory template, mostly useful for tests."""
        self._extra[f"{template_id}.{language}"] = text

    def _find(self, template_id: str, language: str) -> Optional[str]:
        key = f"{template_id}.{language}"
        if key in self._extra:
            return self._extra[key]
        for directory in self.directories:
            path = directory / f"{key}.txt"
            if path.is_file():
                with open(path, encoding="utf8") as f:
                    return f.read()
        return None

    def get(self, template_id: str, language: str = "en") -> str:
        text = self._find(template_id, language)
        if text is None and language != "en":
            LOGGER.debug("No %s variant of %s, using en", language, template_id)
            text = self._find(template_id, "en")
        if text is None:
            raise UnknownTemplate(template_id, language)
        return text

    def exists(self, template_id: str, language: str = "en") -> bool:
        try:
            self.get(template_id, language)
        except UnknownTemplate:
            return False
        return True

    def render(
        self, template_id: str, bindings: Mapping[str, str], language: str = "en"
    ) -> str:
        return substitute(self.get(template_id, language), bindings)


def render_prompt(
    template_id: str,
    bindings: Mapping[str, str],
    language: str = "en",
    store: Optional[PromptStore] = None,
) -> str:
    return (store or PromptStore()).render(template_id, bindings, language)
