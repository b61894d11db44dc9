from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True, order=True)
class Finding:
    rule: str
    subject: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule}[{self.subject}]: {self.detail}" if self.detail else f"{self.rule}[{self.subject}]"


@dataclass
class ValidationReport:
    """Findings are data; an empty report means every check held."""

    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def add(self, rule: str, subject: str, detail: str = "") -> None:
        self.findings.append(Finding(rule, subject, detail))

    def rules(self) -> set[str]:
        return {f.rule for f in self.findings}

    def sort(self) -> "ValidationReport":
        self.findings.sort()
        return self
