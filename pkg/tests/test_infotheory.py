import math
import time

import numpy as np
import pytest
import torch

from bottlemask.infotheory import (
    DiscreteWorld,
    EnumerationTooLarge,
    closed_form_mask_entropy,
    enumerate_joint,
    exact_conditional_mi,
    exact_entropy,
    exact_mutual_information,
    probe_growth_monotonicity,
    random_world,
    run_oracle_suite,
    suite_passed,
    verify_chain_rule,
    verify_closed_form_entropy,
    verify_conditional_mi_decomposition,
    verify_objective_equivalence,
    verify_variational_bound,
)


def one_pixel_world(rho=0.5):
    return DiscreteWorld(
        side=1,
        p_image=np.array([0.5, 0.5]),
        label_probs=np.array([[1.0], [1.0]]),
        rho=np.array([[rho], [rho]]),
    )


class TestEnumeration:
    def test_one_pixel_uniform_gives_four_equal_cells(self):
        table = enumerate_joint(one_pixel_world())
        assert table.p.size == 4  # |images| * 2^(pixels) with one label
        assert np.allclose(table.p, 0.25)

    def test_marginals_sum_to_one(self):
        table = enumerate_joint(random_world(3, side=2, n_classes=3))
        for names in ("i", "c", "m", "o", ("i", "c")):
            assert abs(table.marginal(names).sum() - 1.0) < 1e-12

    def test_cell_count_matches_combinatorics(self):
        world = random_world(1, side=2, n_classes=2)
        table = enumerate_joint(world)
        assert table.p.size == world.n_images * 2 ** world.n_pixels * 2

    def test_too_large_refused_with_estimate(self):
        world = random_world(5, side=3, n_classes=2)
        world.growth = np.eye(512)
        with pytest.raises(EnumerationTooLarge, match="cells"):
            enumerate_joint(world)

    def test_side_above_three_rejected(self):
        with pytest.raises(EnumerationTooLarge):
            DiscreteWorld(4, np.ones(65536) / 65536, np.ones((65536, 1)),
                          np.full((65536, 16), 0.5))


class TestExactQuantities:
    def test_independent_variables_have_zero_mi(self):
        world = DiscreteWorld(
            side=1,
            p_image=np.array([0.3, 0.7]),
            label_probs=np.array([[0.4, 0.6], [0.4, 0.6]]),  # label independent of image
            rho=np.array([[0.5], [0.5]]),
        )
        table = enumerate_joint(world)
        assert exact_mutual_information(table, "i", "c") == pytest.approx(0.0, abs=1e-12)

    def test_identical_uniform_binary_mi_is_ln2(self):
        world = DiscreteWorld(
            side=1,
            p_image=np.array([0.5, 0.5]),
            label_probs=np.array([[1.0, 0.0], [0.0, 1.0]]),
            rho=np.array([[0.5], [0.5]]),
        )
        table = enumerate_joint(world)
        assert exact_mutual_information(table, "i", "c") == pytest.approx(math.log(2), abs=1e-12)

    def test_chain_rule_on_random_worlds(self):
        for seed in range(10):
            table = enumerate_joint(random_world(seed, side=2, n_classes=2))
            lhs = exact_mutual_information(table, "o", ("c", "m"))
            rhs = (exact_mutual_information(table, "o", "m")
                   + exact_conditional_mi(table, "o", "c", "m"))
            assert abs(lhs - rhs) < 1e-12

    def test_entropy_nonnegative_everywhere(self):
        table = enumerate_joint(random_world(11, side=2, n_classes=4))
        for names in ("i", "c", "m", "o"):
            assert exact_entropy(table, names) >= 0.0
        assert exact_conditional_mi(table, "o", "c", "m") >= -1e-12


class TestObjectiveEquivalence:
    def test_relation_on_two_by_two_world(self):
        world = random_world(0, side=2, n_classes=2)
        rng = np.random.default_rng(1)
        pair = (rng.uniform(0.05, 0.95, world.rho.shape),
                rng.uniform(0.05, 0.95, world.rho.shape))
        report = verify_objective_equivalence(world, beta_prime=1.0, rho_pair=pair)
        assert report["passed"]
        assert report["max_deviation"] < 1e-9

    def test_identical_policies_give_zero_difference(self):
        world = random_world(2, side=2)
        rho = np.random.default_rng(3).uniform(0.1, 0.9, world.rho.shape)
        report = verify_objective_equivalence(world, beta_prime=0.5, rho_pair=(rho, rho.copy()))
        assert report["passed"] and report["max_deviation"] < 1e-12

    def test_twenty_random_policy_pairs(self):
        for seed in range(20):
            world = random_world(seed + 100, side=2, n_classes=2 + seed % 2)
            rng = np.random.default_rng(seed)
            pair = (rng.uniform(0.05, 0.95, world.rho.shape),
                    rng.uniform(0.05, 0.95, world.rho.shape))
            report = verify_objective_equivalence(world, beta_prime=0.25 + seed / 7.0, rho_pair=pair)
            assert report["passed"], report

    def test_growth_kernel_refused(self):
        world = random_world(4, side=2, growth=True)
        rho = world.rho
        with pytest.raises(ValueError, match="growth"):
            verify_objective_equivalence(world, 1.0, (rho, rho))


class TestConditionalMiDecomposition:
    def test_constant_label_gives_zero_both_sides(self):
        world = DiscreteWorld(
            side=1,
            p_image=np.array([0.5, 0.5]),
            label_probs=np.array([[1.0], [1.0]]),
            rho=np.array([[0.3], [0.8]]),
        )
        table = enumerate_joint(world)
        assert table.conditional_mutual_information("c", "o", "m") == pytest.approx(0.0, abs=1e-12)
        report = verify_conditional_mi_decomposition(world)
        assert report["passed"]

    def test_deterministic_label_identity_holds(self):
        for seed in range(20):
            world = random_world(seed, side=2, n_classes=3, deterministic_labels=True)
            report = verify_conditional_mi_decomposition(world)
            assert report["passed"], report
            assert report["max_deviation"] < 1e-9

    def test_random_labels_rejected(self):
        world = random_world(0, side=2, deterministic_labels=False)
        with pytest.raises(ValueError, match="deterministic"):
            verify_conditional_mi_decomposition(world)

    def test_wrong_sign_variant_is_caught(self):
        # flipping the sign of the mask-entropy term must break the identity
        world = random_world(8, side=2, n_classes=2, deterministic_labels=True)
        table = enumerate_joint(world)
        lhs = table.conditional_mutual_information("c", "o", "m")
        wrong = (
            table.conditional_entropy("m", "i")
            + table.entropy("i")
            - table.conditional_entropy("i", ("m", "c"))
            + table.entropy("m")          # sign flipped
            - table.conditional_entropy("c", "o")
        )
        assert abs(lhs - wrong) > 1e-3


class TestVariationalBound:
    def test_random_models_never_beat_entropy(self):
        for seed in range(20):
            report = verify_variational_bound(random_world(seed, side=2, n_classes=3), seed=seed)
            assert report["passed"], report

    def test_random_model_strictly_above(self):
        report = verify_variational_bound(random_world(1, side=2), seed=1)
        assert report["min_slack"] > 0.0


class TestGrowthProbe:
    def test_identity_growth_gives_equality(self):
        world = random_world(0, side=2)
        world.growth = np.eye(1 << world.n_pixels)
        probe = probe_growth_monotonicity(world)
        assert probe["mi_before_growth"] == pytest.approx(probe["mi_after_growth"], abs=1e-12)

    def test_full_growth_recovers_image_information(self):
        world = random_world(1, side=2, n_classes=2)
        n_masks = 1 << world.n_pixels
        kernel = np.zeros((n_masks, n_masks))
        kernel[:, n_masks - 1] = 1.0  # always grow to the all-visible mask
        world.growth = kernel
        probe = probe_growth_monotonicity(world)
        table = enumerate_joint(world)
        assert probe["mi_after_growth"] == pytest.approx(
            table.mutual_information("i", "c"), abs=1e-12
        )
        assert probe["mi_after_growth"] >= probe["mi_before_growth"] - 1e-12

    def test_probe_requires_kernel(self):
        with pytest.raises(ValueError):
            probe_growth_monotonicity(random_world(0, side=2))

    def test_sweep_reports_outcomes(self):
        outcomes = [probe_growth_monotonicity(random_world(seed, side=2, growth=True))
                    for seed in range(50)]
        assert all("satisfied" in o for o in outcomes)


class TestClosedFormEntropy:
    def test_matches_enumeration_within_1e_12(self):
        for seed in range(10):
            report = verify_closed_form_entropy(random_world(seed, side=2))
            assert report["passed"] and report["max_deviation"] < 1e-12

    def test_cross_module_against_torch_entropy(self):
        from bottlemask.maskmodel import mask_entropy_continuous

        world = random_world(3, side=2)
        per_image = mask_entropy_continuous(
            torch.tensor(world.rho.reshape(-1, 2, 2), dtype=torch.float64))
        expected = float(world.p_image @ per_image.numpy())
        assert expected == pytest.approx(closed_form_mask_entropy(world), abs=1e-12)


class TestSuite:
    def test_full_suite_passes_quickly(self):
        started = time.time()
        reports = run_oracle_suite(seed=0, n_worlds=20)
        elapsed = time.time() - started
        assert suite_passed(reports)
        assert elapsed < 60.0
        checks = {r["check"] for r in reports}
        assert {"objective_equivalence", "conditional_mi_decomposition",
                "variational_bound", "chain_rule", "closed_form_entropy",
                "growth_monotonicity_probe"} <= checks

    def test_chain_rule_check_includes_nonnegativity(self):
        report = verify_chain_rule(random_world(0, side=2))
        assert report["passed"]
