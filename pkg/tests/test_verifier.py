import numpy as np
import pytest

from graftcert import (
    AttackConfig,
    Box,
    Domain,
    GraftPlan,
    Network,
    NeuronStatus,
    SplitAssignment,
    UndecidableRegion,
    UsageError,
    VerdictStatus,
    VerifyBudget,
    apply_graft,
    bab_verify,
    branch_select,
    build_specs,
    classify_neurons,
    forward,
    forward_batch,
    ibp,
    input_region,
    oracle_input_split,
    pgd_attack,
)

from conftest import manual_layer, random_net


class TestSpecs:
    def test_two_class_margin(self):
        specs = build_specs(2, 0)
        assert len(specs) == 1
        assert specs[0].coeffs.tolist() == [1.0, -1.0]
        assert specs[0].const == 0.0

    def test_ten_class_margins(self):
        specs = build_specs(10, 3)
        assert len(specs) == 9
        assert all(s.coeffs[3] == 1.0 for s in specs)
        assert all(s.coeffs[s.target] == -1.0 for s in specs)

    def test_value_is_margin(self):
        spec = build_specs(2, 0)[0]
        assert spec.value(np.array([2.0, 0.5])) == pytest.approx(1.5)

    def test_label_out_of_range(self):
        with pytest.raises(UsageError):
            build_specs(10, 10)
        with pytest.raises(UsageError):
            build_specs(1, 0)


class TestBranchSelect:
    def _domain_with_bounds(self, lus):
        """A synthetic one-layer net whose IBP bounds equal the given
        per-neuron (l, u) pairs over the box [0, 1]."""
        n = len(lus)
        W = np.array([[u - l] + [0.0] * 0 for l, u in lus]).reshape(n, 1)
        b = np.array([l for l, _ in lus])
        net = Network([manual_layer(W, b), manual_layer(np.ones((1, n)), [0.0])])
        box = Box(np.array([0.0]), np.array([1.0]))
        inter = ibp(net, box)
        dom = Domain(SplitAssignment.free(net), -1.0, 0)
        return net, dom, inter

    def test_single_unstable_forced_choice(self):
        net, dom, inter = self._domain_with_bounds([(-1.0, 1.0), (0.5, 2.0)])
        assert branch_select(dom, inter) == 0

    def test_score_arithmetic(self):
        # A: |l u| / (u - l) = 0.5; B: 0.05
        net, dom, inter = self._domain_with_bounds([(-1.0, 1.0), (-0.1, 0.1)])
        assert branch_select(dom, inter) == 0

    def test_tie_breaks_to_lowest_id(self):
        net, dom, inter = self._domain_with_bounds([(-1.0, 1.0), (-1.0, 1.0)])
        assert branch_select(dom, inter) == 0

    def test_no_unstable_raises(self):
        net, dom, inter = self._domain_with_bounds([(0.5, 1.0)])
        with pytest.raises(UsageError):
            branch_select(dom, inter)


class TestPgdAttack:
    def test_zero_eps_reflects_clean_classification(self):
        net = random_net(200, widths=[2, 6, 2])
        rng = np.random.default_rng(0)
        found_correct = found_wrong = False
        for i in range(40):
            x0 = rng.uniform(0, 1, 2)
            logits, _, _ = forward(net, x0)
            label = i % 2
            correct = int(np.argmax(logits)) == label
            adv = pgd_attack(net, x0, label, AttackConfig(0.0, steps=3), seed=i)
            if correct:
                assert adv is None
                found_correct = True
            else:
                assert adv is not None and np.array_equal(adv, x0)
                found_wrong = True
        assert found_correct and found_wrong

    def test_counterexample_within_ball_and_clip(self):
        rng = np.random.default_rng(5)
        hits = 0
        for seed in range(30):
            net = random_net(300 + seed, widths=[2, 5, 2])
            x0 = rng.uniform(0, 1, 2)
            logits, _, _ = forward(net, x0)
            label = int(np.argmax(logits))
            eps = 0.3
            adv = pgd_attack(
                net, x0, label, AttackConfig(eps, steps=20, restarts=3, clip=(0, 1)), seed=seed
            )
            if adv is None:
                continue
            hits += 1
            assert np.max(np.abs(adv - x0)) <= eps + 1e-12
            assert np.all(adv >= 0) and np.all(adv <= 1)
            logits_adv, _, _ = forward(net, adv)
            assert int(np.argmax(logits_adv)) != label
        assert hits > 0  # the suite must actually exercise successful attacks

    def test_attack_success_blocks_verification(self):
        # soundness cross-check: a successful attack implies bab never verifies
        rng = np.random.default_rng(6)
        checked = 0
        for seed in range(40):
            net = random_net(400 + seed, widths=[2, 4, 2])
            x0 = rng.uniform(0, 1, 2)
            logits, _, _ = forward(net, x0)
            label = int(np.argmax(logits))
            eps = 0.25
            adv = pgd_attack(net, x0, label, AttackConfig(eps, steps=15, restarts=2, clip=(0, 1)), seed=seed)
            if adv is None:
                continue
            box = input_region(x0, eps, (0, 1))
            for spec in build_specs(2, label):
                v = bab_verify(net, spec, box, VerifyBudget(None, 2000), seed=seed)
                assert v.status != VerdictStatus.VERIFIED or spec.value(forward(net, adv)[0]) > 0
            checked += 1
        assert checked > 0


class TestBabVerify:
    def test_fully_grafted_decides_at_root(self):
        net = random_net(500, widths=[2, 4, 2])
        plan = GraftPlan(tuple(range(net.num_hidden)), ((1.0, 0.0),), 0.3, 0.05)
        net = apply_graft(net, plan)
        box = input_region(np.array([0.4, 0.6]), 0.2)
        spec = build_specs(2, 0)[0]
        v = bab_verify(net, spec, box, VerifyBudget(None, 100), seed=0)
        assert v.domains_explored == 1
        assert v.status in (VerdictStatus.VERIFIED, VerdictStatus.FALSIFIED)

    def test_root_verified_when_bound_positive(self):
        # a net whose margin is trivially positive over the box
        net = Network([manual_layer([[1.0], [0.0]], [5.0, 0.0])])
        box = Box(np.array([0.0]), np.array([1.0]))
        spec = build_specs(2, 0)[0]
        v = bab_verify(net, spec, box, VerifyBudget(None, 100), seed=0)
        assert v.status == VerdictStatus.VERIFIED
        assert v.domains_explored == 1
        assert v.bound > 0

    def test_falsified_has_valid_counterexample(self):
        rng = np.random.default_rng(7)
        falsified = 0
        for seed in range(30):
            net = random_net(600 + seed, widths=[2, 5, 2])
            x0 = rng.uniform(0.2, 0.8, 2)
            eps = 0.35
            box = input_region(x0, eps, (0, 1))
            logits, _, _ = forward(net, box.center())
            spec = build_specs(2, int(np.argmax(logits)))[0]
            v = bab_verify(net, spec, box, VerifyBudget(None, 4000), seed=seed)
            if v.status != VerdictStatus.FALSIFIED:
                continue
            falsified += 1
            cex = v.counterexample
            assert cex is not None
            assert box.contains(cex, atol=1e-12)
            assert spec.value(forward(net, cex)[0]) < 0
        assert falsified > 0

    def test_verified_survives_sampling_attack(self):
        rng = np.random.default_rng(8)
        verified = 0
        for seed in range(25):
            net = random_net(700 + seed, widths=[2, 4, 2])
            x0 = rng.uniform(0.2, 0.8, 2)
            box = input_region(x0, 0.15, (0, 1))
            logits, _, _ = forward(net, box.center())
            spec = build_specs(2, int(np.argmax(logits)))[0]
            v = bab_verify(net, spec, box, VerifyBudget(None, 4000), seed=seed)
            if v.status != VerdictStatus.VERIFIED:
                continue
            verified += 1
            xs = box.sample(rng, 10_000)
            vals = forward_batch(net, xs)[0] @ spec.coeffs + spec.const
            assert vals.min() > 0
        assert verified > 0

    def test_progress_and_budget(self):
        net = random_net(801, widths=[2, 8, 8, 2])
        box = input_region(np.array([0.5, 0.5]), 0.4, (0, 1))
        spec = build_specs(2, 0)[0]
        budget = VerifyBudget(None, 50)
        v = bab_verify(net, spec, box, budget, seed=0)
        assert v.domains_explored <= budget.max_domains

    def test_deterministic_verdicts(self):
        net = random_net(802, widths=[2, 6, 2])
        box = input_region(np.array([0.5, 0.5]), 0.3, (0, 1))
        spec = build_specs(2, 0)[0]
        a = bab_verify(net, spec, box, VerifyBudget(None, 500), seed=3)
        b = bab_verify(net, spec, box, VerifyBudget(None, 500), seed=3)
        assert a.status == b.status
        assert a.bound == b.bound
        assert a.domains_explored == b.domains_explored

    def test_timeout_reports_worst_remaining_bound(self):
        found = False
        for seed in range(40):
            net = random_net(900 + seed, widths=[3, 10, 10, 2], weight_scale=1.2)
            box = input_region(np.full(3, 0.5), 0.5, (0, 1))
            spec = build_specs(2, 0)[0]
            v = bab_verify(net, spec, box, VerifyBudget(None, 20), seed=seed)
            if v.status == VerdictStatus.TIMEOUT:
                assert v.bound <= 0
                found = True
                break
        assert found

    def test_grafting_reduces_root_search_exactly_on_last_layer(self):
        # grafting unstable neurons of the last hidden layer leaves every
        # other neuron's bounds untouched, so the root unstable count drops
        # by exactly the grafted-unstable overlap
        for seed in range(10):
            net = random_net(1000 + seed, widths=[2, 5, 6, 2])
            box = input_region(np.array([0.5, 0.5]), 0.3, (0, 1))
            inter = ibp(net, box)
            status = classify_neurons(inter, SplitAssignment.free(net))
            off = net.layer_offsets()[-1]
            last = np.arange(off, net.num_hidden)
            unstable_last = [int(i) for i in last if status[i] == NeuronStatus.UNSTABLE]
            if not unstable_last:
                continue
            take = tuple(unstable_last[: max(1, len(unstable_last) // 2)])
            grafted = apply_graft(net, GraftPlan(take, ((len(take) / net.num_hidden, 0.0),), 0.25, 0.0))
            st2 = classify_neurons(ibp(grafted, box), SplitAssignment.free(grafted))
            before = int((status == NeuronStatus.UNSTABLE).sum())
            after = int((st2 == NeuronStatus.UNSTABLE).sum())
            assert after == before - len(take)

    def test_zero_graft_never_increases_unstable_count(self):
        # slope-0 grafts shrink every downstream interval, so instability
        # can only go down
        for seed in range(10):
            rng = np.random.default_rng(1100 + seed)
            net = random_net(1100 + seed)
            box = input_region(rng.uniform(0, 1, net.input_dim), 0.3)
            status = classify_neurons(ibp(net, box), SplitAssignment.free(net))
            unstable = np.flatnonzero(status == NeuronStatus.UNSTABLE)
            if unstable.size == 0:
                continue
            take = tuple(int(i) for i in unstable[: max(1, unstable.size // 2)])
            grafted = apply_graft(net, GraftPlan(take, ((len(take) / net.num_hidden, 0.0),), 0.0, 0.0))
            st2 = classify_neurons(ibp(grafted, box), SplitAssignment.free(grafted))
            before = int((status == NeuronStatus.UNSTABLE).sum())
            after = int((st2 == NeuronStatus.UNSTABLE).sum())
            assert after <= before - len(take)


class TestOracle:
    def test_positive_affine_verified_at_root(self):
        net = Network([manual_layer([[1.0]], [1.0])])
        spec = type(build_specs(2, 0)[0])(np.array([1.0]), 0.0, None, None)
        box = Box(np.array([0.0]), np.array([1.0]))
        assert oracle_input_split(net, spec, box, 1e-4) == VerdictStatus.VERIFIED

    def test_sign_change_falsified(self):
        net = Network([manual_layer([[1.0]], [-0.5])])
        spec = type(build_specs(2, 0)[0])(np.array([1.0]), 0.0, None, None)
        box = Box(np.array([0.0]), np.array([1.0]))
        assert oracle_input_split(net, spec, box, 1e-4) == VerdictStatus.FALSIFIED

    def test_dimension_guard(self):
        net = random_net(1200, widths=[4, 3, 2])
        spec = build_specs(2, 0)[0]
        box = Box(np.zeros(4), np.ones(4))
        with pytest.raises(UsageError):
            oracle_input_split(net, spec, box, 1e-4)

    def test_undecidable_at_tolerance(self):
        # min exactly zero at a corner: neither side can resolve
        net = Network([manual_layer([[1.0]], [0.0])])
        spec = type(build_specs(2, 0)[0])(np.array([1.0]), 0.0, None, None)
        box = Box(np.array([0.0]), np.array([1.0]))
        with pytest.raises(UndecidableRegion):
            oracle_input_split(net, spec, box, 1e-3)

    @pytest.mark.parametrize("seed", range(20))
    def test_agrees_with_bab(self, seed):
        rng = np.random.default_rng(1300 + seed)
        net = random_net(1300 + seed, widths=[2, 5, 5, 2], weight_scale=0.9)
        x0 = rng.uniform(0.2, 0.8, 2)
        eps = float(rng.uniform(0.1, 0.4))
        box = input_region(x0, eps, (0, 1))
        logits, _, _ = forward(net, box.center())
        spec = build_specs(2, int(np.argmax(logits)))[0]
        xs = box.sample(rng, 20_000)
        est = float((forward_batch(net, xs)[0] @ spec.coeffs).min())
        if abs(est) <= 1e-4:
            pytest.skip("margin too close to zero")
        try:
            o = oracle_input_split(net, spec, box, 1e-4)
        except UndecidableRegion:
            pytest.skip("oracle undecidable at tolerance")
        v = bab_verify(net, spec, box, VerifyBudget(None, 40_000), seed=7)
        assert (o == VerdictStatus.VERIFIED) == (v.status == VerdictStatus.VERIFIED)
