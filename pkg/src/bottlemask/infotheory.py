"""Exact, enumeration-based information quantities on tiny discrete worlds.

A world consists of all binary images of a small side (<= 3), a label
distribution per image, a tabulated per-pixel keep-probability map per image
and, optionally, a mask-growth kernel restricted so that growth never hides
a visible pixel.  From these the full joint distribution over

    i   image index
    c   label
    m   mask bit-pattern
    mp  grown mask bit-pattern
    o   masked image (pixels zeroed + indicator), encoded base-3
    op  masked image under the grown mask

is enumerated exactly, and entropies / mutual informations are computed by
summation in float64 nats.  This module is the independent referee for the
optimization objectives implemented elsewhere in the package; it never
imports from the training code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_CELLS = 10_000_000


class EnumerationTooLarge(ValueError):
    """The requested joint table would exceed the enumeration ceiling."""


def _bit_patterns(n_bits: int) -> np.ndarray:
    """All 2^n binary patterns as an (2^n, n_bits) 0/1 array, LSB first."""
    count = 1 << n_bits
    idx = np.arange(count, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n_bits)) & 1).astype(np.int64)


@dataclass
class DiscreteWorld:
    """Tabulated joint model over binary images, labels and masks.

    Attributes:
        side: image side length, at most 3.
        p_image: (n_images,) image probabilities, n_images = 2^(side^2).
        label_probs: (n_images, n_classes) rows p(c | i).
        rho: (n_images, side^2) keep probabilities, strictly inside (0, 1).
        growth: optional (n_masks, n_masks) kernel p(m' | m); rows sum to 1
            and entries are zero unless m' keeps every pixel m keeps.
    """

    side: int
    p_image: np.ndarray
    label_probs: np.ndarray
    rho: np.ndarray
    growth: np.ndarray | None = None

    def __post_init__(self):
        if self.side > 3 or self.side < 1:
            raise EnumerationTooLarge(
                f"side {self.side} not enumerable; joint would need "
                f"~{(2 ** (self.side ** 2)) ** 2} image-mask cells"
            )
        n_pixels = self.side ** 2
        n_images = 1 << n_pixels
        self.p_image = np.asarray(self.p_image, dtype=np.float64)
        self.label_probs = np.asarray(self.label_probs, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.p_image.shape != (n_images,):
            raise ValueError(f"p_image must have shape ({n_images},)")
        if abs(self.p_image.sum() - 1.0) > 1e-12:
            raise ValueError("image probabilities must sum to 1 within 1e-12")
        if self.label_probs.shape[0] != n_images:
            raise ValueError("label_probs must have one row per image")
        if np.abs(self.label_probs.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("label rows must sum to 1 within 1e-12")
        if self.rho.shape != (n_images, n_pixels):
            raise ValueError(f"rho must have shape ({n_images}, {n_pixels})")
        if self.rho.min() <= 0.0 or self.rho.max() >= 1.0:
            raise ValueError("rho must be strictly inside (0, 1)")
        if self.growth is not None:
            n_masks = 1 << n_pixels
            self.growth = np.asarray(self.growth, dtype=np.float64)
            if self.growth.shape != (n_masks, n_masks):
                raise ValueError(f"growth kernel must be ({n_masks}, {n_masks})")
            if np.abs(self.growth.sum(axis=1) - 1.0).max() > 1e-12:
                raise ValueError("growth kernel rows must sum to 1")
            masks = _bit_patterns(n_pixels)
            shrinks = (masks[:, None, :] > masks[None, :, :]).any(axis=2)
            if (self.growth[shrinks] != 0).any():
                raise ValueError("growth kernel must never hide a visible pixel")

    @property
    def n_pixels(self) -> int:
        return self.side ** 2

    @property
    def n_images(self) -> int:
        return 1 << self.n_pixels

    @property
    def n_classes(self) -> int:
        return self.label_probs.shape[1]

    def labels_deterministic(self) -> bool:
        return bool((self.label_probs.max(axis=1) == 1.0).all())


class JointTable:
    """Flat enumeration of a joint distribution with named integer columns."""

    def __init__(self, columns: dict[str, np.ndarray], p: np.ndarray):
        self.columns = {k: np.asarray(v, dtype=np.int64) for k, v in columns.items()}
        self.p = np.asarray(p, dtype=np.float64)
        keep = self.p > 0.0
        if not keep.all():
            self.p = self.p[keep]
            self.columns = {k: v[keep] for k, v in self.columns.items()}
        total = self.p.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"joint table sums to {total}, expected 1")

    def _keys(self, names) -> np.ndarray:
        """Pack the selected columns into one int64 key per row (mixed radix)."""
        if isinstance(names, str):
            names = (names,)
        key = np.zeros(self.p.shape[0], dtype=np.int64)
        radix = 1
        for n in names:
            col = self.columns[n]
            span = int(col.max()) + 1 if col.size else 1
            if radix > (1 << 62) // max(span, 1):
                raise EnumerationTooLarge("grouping key exceeds 64-bit range")
            key = key * span + col
            radix *= span
        return key

    def marginal(self, names) -> np.ndarray:
        """Probabilities of the distinct value combinations of `names`."""
        _, inverse = np.unique(self._keys(names), return_inverse=True)
        return np.bincount(inverse, weights=self.p)

    def entropy(self, names) -> float:
        probs = self.marginal(names)
        probs = probs[probs > 0]
        return float(-(probs * np.log(probs)).sum())

    def joint_entropy(self, *groups) -> float:
        names = []
        for g in groups:
            names.extend([g] if isinstance(g, str) else list(g))
        return self.entropy(tuple(names))

    def mutual_information(self, a, b) -> float:
        return self.entropy(a) + self.entropy(b) - self.joint_entropy(a, b)

    def conditional_entropy(self, a, given) -> float:
        return self.joint_entropy(a, given) - self.entropy(given)

    def conditional_mutual_information(self, a, b, given) -> float:
        return (
            self.joint_entropy(a, given)
            + self.joint_entropy(b, given)
            - self.joint_entropy(a, b, given)
            - self.entropy(given)
        )


def exact_entropy(table: JointTable, names) -> float:
    return table.entropy(names)


def exact_mutual_information(table: JointTable, a, b) -> float:
    return table.mutual_information(a, b)


def exact_conditional_mi(table: JointTable, a, b, given) -> float:
    return table.conditional_mutual_information(a, b, given)


def masked_image_codes(image_bits: np.ndarray, mask_bits: np.ndarray) -> np.ndarray:
    """Encode masked images in base 3: 0 hidden, 1 visible-dark, 2 visible-lit.

    The encoding keeps the visibility indicator distinct from a dark pixel,
    mirroring the two-channel masked-image construction.
    """
    n_pixels = image_bits.shape[-1]
    digits = mask_bits * (1 + image_bits)
    pow3 = 3 ** np.arange(n_pixels, dtype=np.int64)
    return digits @ pow3


def enumerate_joint(world: DiscreteWorld, rho: np.ndarray | None = None) -> JointTable:
    """Materialize the exact joint over (i, c, m, mp, o, op).

    ``rho`` overrides the world's mask policy (used to compare policies on a
    fixed world).  Raises EnumerationTooLarge when the cell count would
    exceed the ceiling.
    """
    n_pixels = world.n_pixels
    n_images, n_classes = world.n_images, world.n_classes
    n_masks = 1 << n_pixels
    n_grown = n_masks if world.growth is not None else 1
    cells = n_images * n_classes * n_masks * n_grown
    if cells > MAX_CELLS:
        raise EnumerationTooLarge(
            f"joint table would hold {cells} cells, above the {MAX_CELLS} ceiling"
        )
    rho = world.rho if rho is None else np.asarray(rho, dtype=np.float64)

    images = _bit_patterns(n_pixels)
    masks = _bit_patterns(n_pixels)
    # p(m | i): product over pixels of rho or 1-rho
    log_rho = np.log(rho)
    log_neg = np.log1p(-rho)
    log_pm = masks @ log_rho.T + (1 - masks) @ log_neg.T   # (n_masks, n_images)
    pm_given_i = np.exp(log_pm).T                          # (n_images, n_masks)

    i_col, c_col, m_col, mp_col, p_col = [], [], [], [], []
    for i in range(n_images):
        base = world.p_image[i] * pm_given_i[i]            # (n_masks,) = p(i, m)
        for c in range(n_classes):
            pc = world.label_probs[i, c]
            if pc == 0.0:
                continue
            if world.growth is None:
                i_col.append(np.full(n_masks, i))
                c_col.append(np.full(n_masks, c))
                m_col.append(np.arange(n_masks))
                mp_col.append(np.arange(n_masks))
                p_col.append(base * pc)
            else:
                probs = base[:, None] * pc * world.growth   # (n_masks, n_masks)
                m_idx, mp_idx = np.nonzero(probs > 0.0)
                i_col.append(np.full(m_idx.size, i))
                c_col.append(np.full(m_idx.size, c))
                m_col.append(m_idx)
                mp_col.append(mp_idx)
                p_col.append(probs[m_idx, mp_idx])

    i_arr = np.concatenate(i_col)
    m_arr = np.concatenate(m_col)
    mp_arr = np.concatenate(mp_col)
    o_arr = masked_image_codes(images[i_arr], masks[m_arr])
    op_arr = masked_image_codes(images[i_arr], masks[mp_arr])
    return JointTable(
        {
            "i": i_arr,
            "c": np.concatenate(c_col),
            "m": m_arr,
            "mp": mp_arr,
            "o": o_arr,
            "op": op_arr,
        },
        np.concatenate(p_col),
    )


def closed_form_mask_entropy(world: DiscreteWorld, rho: np.ndarray | None = None) -> float:
    """Sum over images of p(i) times the pixelwise Bernoulli entropy of rho."""
    rho = world.rho if rho is None else np.asarray(rho, dtype=np.float64)
    h = -(rho * np.log(rho) + (1 - rho) * np.log1p(-rho)).sum(axis=1)
    return float(world.p_image @ h)


# ---------------------------------------------------------------------------
# random world factory
# ---------------------------------------------------------------------------

def random_world(
    seed: int,
    side: int = 2,
    n_classes: int = 2,
    deterministic_labels: bool = False,
    growth: bool = False,
) -> DiscreteWorld:
    rng = np.random.default_rng(seed)
    n_pixels = side ** 2
    n_images = 1 << n_pixels
    p_image = rng.dirichlet(np.ones(n_images))
    if deterministic_labels:
        label_probs = np.zeros((n_images, n_classes))
        label_probs[np.arange(n_images), rng.integers(0, n_classes, n_images)] = 1.0
    else:
        label_probs = rng.dirichlet(np.ones(n_classes), size=n_images)
    rho = rng.uniform(0.05, 0.95, size=(n_images, n_pixels))
    kernel = random_growth_kernel(rng, n_pixels) if growth else None
    return DiscreteWorld(side, p_image, label_probs, rho, kernel)


def random_growth_kernel(rng: np.random.Generator, n_pixels: int) -> np.ndarray:
    """Per-mask independent flip-up kernel: hidden pixels open with prob q(m)."""
    masks = _bit_patterns(n_pixels)
    n_masks = masks.shape[0]
    q = rng.uniform(0.1, 0.9, size=n_masks)
    kernel = np.zeros((n_masks, n_masks))
    for m in range(n_masks):
        open_pixels = masks[m] == 0
        grown_ok = (masks >= masks[m]).all(axis=1)
        for mp in np.nonzero(grown_ok)[0]:
            flips = masks[mp][open_pixels]
            kernel[m, mp] = np.prod(np.where(flips == 1, q[m], 1 - q[m]))
    return kernel


# ---------------------------------------------------------------------------
# identity and bound verifications
# ---------------------------------------------------------------------------

def _report(check: str, seed, max_deviation: float, passed: bool, **extra) -> dict:
    rec = {
        "check": check,
        "seed": seed,
        "max_deviation": float(max_deviation),
        "passed": bool(passed),
    }
    rec.update(extra)
    return rec


def _assert_nonnegative(table: JointTable) -> float:
    """Entropies and (conditional) MIs must never be negative."""
    worst = 0.0
    for names in ("i", "c", "m", "o", ("i", "c")):
        worst = min(worst, table.entropy(names))
    worst = min(worst, table.mutual_information("o", "c"))
    worst = min(worst, table.conditional_mutual_information("o", "c", "m"))
    return worst


def compression_objective(table: JointTable, beta: float) -> float:
    """beta * I(masked; image) - I(masked-grown; label)."""
    return beta * table.mutual_information("o", "i") - table.mutual_information("op", "c")


def conditional_compression_objective(table: JointTable, beta_prime: float) -> float:
    """beta' * I(masked; image | label) - I(masked-grown; label)."""
    return (
        beta_prime * table.conditional_mutual_information("o", "i", "c")
        - table.mutual_information("op", "c")
    )


def verify_objective_equivalence(
    world: DiscreteWorld,
    beta_prime: float,
    rho_pair: tuple[np.ndarray, np.ndarray],
    tolerance: float = 1e-9,
) -> dict:
    """Label-conditioned and plain compression objectives rank policies identically.

    Without mask growth, for any two mask policies the difference of the
    conditional objectives at beta' equals (1 + beta') times the difference
    of the plain objectives at beta = beta' / (1 + beta').
    """
    if world.growth is not None:
        raise ValueError("equivalence holds only without mask growth; drop the kernel")
    beta = beta_prime / (1.0 + beta_prime)
    q, qp = [], []
    for rho in rho_pair:
        table = enumerate_joint(world, rho=rho)
        q.append(compression_objective(table, beta))
        qp.append(conditional_compression_objective(table, beta_prime))
    deviation = abs((qp[0] - qp[1]) - (1.0 + beta_prime) * (q[0] - q[1]))
    return _report("objective_equivalence", None, deviation, deviation < tolerance,
                   beta_prime=beta_prime)


def verify_conditional_mi_decomposition(world: DiscreteWorld,
                                        tolerance: float = 1e-9) -> dict:
    """I(C; O | M) decomposes into the five-entropy expression.

    Requires labels deterministic given the image (the label stands in for
    the proxy c'(i)); otherwise the decomposition does not hold.
    """
    if not world.labels_deterministic():
        raise ValueError("decomposition requires labels deterministic given the image")
    table = enumerate_joint(world)
    lhs = table.conditional_mutual_information("c", "o", "m")
    rhs = (
        table.conditional_entropy("m", "i")
        + table.entropy("i")
        - table.conditional_entropy("i", ("m", "c"))
        - table.entropy("m")
        - table.conditional_entropy("c", "o")
    )
    deviation = abs(lhs - rhs)
    return _report("conditional_mi_decomposition", None, deviation, deviation < tolerance)


def verify_variational_bound(world: DiscreteWorld, seed: int,
                             tolerance: float = 1e-9) -> dict:
    """-E log(model) upper-bounds the true entropy for tabulated models.

    Checks both the masked-image marginal model and the label-given-masked
    classifier; equality is verified when the model equals the truth.
    """
    rng = np.random.default_rng(seed)
    table = enumerate_joint(world)
    worst = np.inf  # smallest slack; must stay >= -tolerance

    p_o = table.marginal("o")
    g = rng.dirichlet(np.ones(p_o.size))
    cross = float(-(p_o * np.log(g)).sum())
    worst = min(worst, cross - table.entropy("o"))
    # equality at the true marginal
    eq_dev = abs(float(-(p_o * np.log(p_o)).sum()) - table.entropy("o"))

    # classifier bound: -E log h(c | op) >= H(C | OP) for a tabulated h
    op_vals, op_inverse = np.unique(table.columns["op"], return_inverse=True)
    n_classes = world.n_classes
    h_model = rng.dirichlet(np.ones(n_classes), size=op_vals.size)
    cross_h = float(-(table.p * np.log(h_model[op_inverse, table.columns["c"]])).sum())
    worst = min(worst, cross_h - table.conditional_entropy("c", "op"))

    passed = worst > -tolerance and eq_dev < tolerance
    return _report("variational_bound", seed, max(eq_dev, max(0.0, -worst)), passed,
                   min_slack=float(worst))


def verify_chain_rule(world: DiscreteWorld, tolerance: float = 1e-12) -> dict:
    """I(X; Y, Z) = I(X; Z) + I(X; Y | Z) on the enumerated joint."""
    table = enumerate_joint(world)
    lhs = table.mutual_information("o", ("c", "m"))
    rhs = table.mutual_information("o", "m") + table.conditional_mutual_information("o", "c", "m")
    deviation = abs(lhs - rhs)
    nonneg = _assert_nonnegative(table)
    return _report("chain_rule", None, deviation, deviation < tolerance and nonneg > -1e-12)


def verify_closed_form_entropy(world: DiscreteWorld, tolerance: float = 1e-12) -> dict:
    """Pixelwise Bernoulli entropy formula equals the enumerated H(M | I)."""
    table = enumerate_joint(world)
    enumerated = table.conditional_entropy("m", "i")
    deviation = abs(enumerated - closed_form_mask_entropy(world))
    return _report("closed_form_entropy", None, deviation, deviation < tolerance)


def probe_growth_monotonicity(world: DiscreteWorld) -> dict:
    """Record whether growing masks kept at least as much label information.

    This is a probe, not an assertion: the claimed ordering is not proven in
    general, so outcomes are tabulated for inspection.
    """
    if world.growth is None:
        raise ValueError("growth probe requires a growth kernel")
    table = enumerate_joint(world)
    before = table.mutual_information("o", "c")
    after = table.mutual_information("op", "c")
    return {
        "check": "growth_monotonicity_probe",
        "mi_before_growth": before,
        "mi_after_growth": after,
        "satisfied": bool(after >= before - 1e-12),
    }


def run_oracle_suite(seed: int = 0, n_worlds: int = 20) -> list[dict]:
    """Run every identity check over seeded random worlds; returns reports.

    Probe records carry no pass flag and do not gate the suite.
    """
    reports: list[dict] = []
    rng = np.random.default_rng(seed)
    for k in range(n_worlds):
        wseed = int(rng.integers(0, 2 ** 31))
        side = 2 if k % 4 else 3

        world = random_world(wseed, side=2, n_classes=2 + k % 2)
        rho_pair = (
            np.random.default_rng(wseed + 1).uniform(0.05, 0.95, world.rho.shape),
            np.random.default_rng(wseed + 2).uniform(0.05, 0.95, world.rho.shape),
        )
        rep = verify_objective_equivalence(world, beta_prime=0.25 + (k % 5), rho_pair=rho_pair)
        rep["seed"] = wseed
        reports.append(rep)

        det_world = random_world(wseed + 3, side=side, n_classes=2, deterministic_labels=True)
        rep = verify_conditional_mi_decomposition(det_world)
        rep["seed"] = wseed + 3
        reports.append(rep)

        bound_world = random_world(wseed + 4, side=2, n_classes=3)
        reports.append(verify_variational_bound(bound_world, seed=wseed + 4))

        chain_world = random_world(wseed + 5, side=side, n_classes=2)
        rep = verify_chain_rule(chain_world)
        rep["seed"] = wseed + 5
        reports.append(rep)

        rep = verify_closed_form_entropy(random_world(wseed + 6, side=side))
        rep["seed"] = wseed + 6
        reports.append(rep)

        growth_world = random_world(wseed + 7, side=2, n_classes=2, growth=True)
        probe = probe_growth_monotonicity(growth_world)
        probe["seed"] = wseed + 7
        reports.append(probe)
    return reports


def suite_passed(reports: list[dict]) -> bool:
    return all(r["passed"] for r in reports if "passed" in r)
