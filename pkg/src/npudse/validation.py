from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Violation:
    rule: str
    ids: tuple[str, ...]
    message: str = ""

    def __str__(self) -> str:
        where = ", ".join(self.ids)
        return f"[{self.rule}] {where}: {self.message}" if self.message else f"[{self.rule}] {where}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def add(self, rule: str, ids, message: str = "") -> None:
        self.violations.append(Violation(rule, tuple(ids), message))

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def __str__(self) -> str:
        return "\n".join(str(v) for v in self.violations) or "ok"


class InvalidScheduleError(ValueError):
    def __init__(self, report: ValidationReport):
        self.report = report
        super().__init__("invalid schedule:\n" + str(report))
