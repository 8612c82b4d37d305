from dataclasses import asdict, dataclass, replace

from ..datasets import Domain, parse_domain
from ..errors import ConfigurationError


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    step_size: float
    iterations: int
    norm: str = "linf"
    decay: float = 1.0  # MI-FGSM momentum
    confidence: float = 0.0  # C&W margin kappa
    binary_search_steps: int = 4
    learning_rate: float = 0.05  # C&W Adam step
    initial_const: float = 0.1
    overshoot: float = 0.02  # DeepFool

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.norm not in ("linf", "l2"):
            raise ConfigurationError(f"norm must be linf or l2, got {self.norm!r}")

    def to_dict(self):
        return asdict(self)

    def with_(self, **changes):
        return replace(self, **changes)


def default_budgets(domain) -> dict:
    """Conventional budgets per adversary name."""
    domain = parse_domain(domain)
    if domain is Domain.CIFAR10:
        linf = AttackBudget(epsilon=8 / 255, step_size=2 / 255, iterations=20)
    else:
        linf = AttackBudget(epsilon=0.3, step_size=0.01, iterations=40)
    l2 = AttackBudget(epsilon=10.0, step_size=0.0, iterations=50, norm="l2")
    return {
        "FGSM": linf,
        "BIM": linf,
        "PGD": linf,
        "MI-FGSM": linf,
        "CW": l2,
        "DeepFool": l2,
    }
