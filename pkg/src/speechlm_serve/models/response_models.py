"""Result types shared by the server, CLI and evaluation tooling."""

from dataclasses import dataclass
from typing import Any, Dict, Optional


@dataclass
class ErrorDetails:
    """Details about an error that occurred."""
    code: str
    message: str
    category: str = "internal"
    severity: str = "medium"
    operation: Optional[str] = None
    details: Optional[Dict[str, Any]] = None

    def to_wire(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {"code": self.code, "message": self.message}
        if self.details:
            body["details"] = self.details
        return body
