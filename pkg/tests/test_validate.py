"""Validator tests: typing, name resolution, barrier placement, warp gating."""

from blockfuse.parser import parse
from blockfuse.validate import analyze, validate


def kinds(source, warp_mode=False):
    return [d.kind for d in validate(parse(source), warp_mode=warp_mode)]


class TestBarrierPlacement:
    def test_top_level_barrier_ok(self):
        assert kinds("kernel k() { barrier; }") == []

    def test_barrier_in_divergent_if(self):
        src = "kernel k() { if (threadIdx.x < 5) { barrier; } }"
        assert kinds(src) == ["barrier-in-divergent-context"]

    def test_barrier_in_any_if_rejected(self):
        # even a uniform branch is rejected: fission does not descend into ifs
        src = "kernel k(n: i32) { if (n < 5) { barrier; } }"
        assert kinds(src) == ["barrier-in-divergent-context"]

    def test_barrier_in_uniform_for_ok(self):
        src = "kernel k(n: i32) { for (i = 0; i < n; i += 1) { barrier; } }"
        assert kinds(src) == []

    def test_barrier_in_variant_for(self):
        src = ("kernel k() { for (i = 0; i < threadIdx.x; i += 1) "
               "{ barrier; } }")
        assert kinds(src) == ["barrier-in-divergent-context"]

    def test_barrier_in_nested_for(self):
        src = ("kernel k(n: i32) { for (i = 0; i < n; i += 1) "
               "{ for (j = 0; j < n; j += 1) { barrier; } } }")
        assert kinds(src) == ["barrier-in-divergent-context"]


class TestWarpGating:
    SHFL = "kernel k(x: global i32[]) { let v: i32 = shfl_down(x[0], 1); }"

    def test_shuffle_without_warp_mode(self):
        assert kinds(self.SHFL) == ["shuffle-without-warp-mode"]

    def test_shuffle_with_warp_mode(self):
        assert kinds(self.SHFL, warp_mode=True) == []

    def test_shuffle_in_divergent_branch(self):
        src = ("kernel k(x: global i32[]) { if (threadIdx.x < 5) "
               "{ let v: i32 = shfl_down(x[0], 1); } }")
        assert kinds(src, warp_mode=True) == ["warp-intrinsic-in-divergent-context"]

    def test_vote_in_loop_bound(self):
        src = ("kernel k() { for (i = 0; i < vote_any(1); i += 1) { } }")
        assert "warp-intrinsic-in-divergent-context" in kinds(src, warp_mode=True)


class TestNamesAndTypes:
    def test_unresolved_name(self):
        assert kinds("kernel k() { let v: i32 = q; }") == ["unresolved-name"]

    def test_duplicate_param(self):
        assert "duplicate-name" in kinds("kernel k(a: i32, a: i32) { }")

    def test_duplicate_local(self):
        src = "kernel k() { let v: i32 = 0; let v: i32 = 1; }"
        assert "duplicate-name" in kinds(src)

    def test_type_mismatch_assign(self):
        src = "kernel k(a: global i32[]) { a[0] = 1.5; }"
        assert "type-error" in kinds(src)

    def test_float_modulo_rejected(self):
        src = "kernel k() { let v: f32 = 1.0 % 2.0; }"
        assert "type-error" in kinds(src)

    def test_counter_assignment_rejected(self):
        src = ("kernel k(n: i32) { for (i = 0; i < n; i += 1) { i = 0; } }")
        assert "invalid-lvalue" in kinds(src)

    def test_counter_visible_in_step(self):
        # C-style scoping: i += i doubles the counter
        src = "kernel k(n: i32) { for (i = 1; i < n; i += i) { } }"
        assert kinds(src) == []

    def test_atomic_cas_on_float(self):
        src = "kernel k(x: global f32[]) { atomic_cas(x[0], 0, 5); }"
        assert "type-error" in kinds(src)

    def test_deterministic_diagnostics(self):
        src = "kernel k() { let v: i32 = q; let w: i32 = r; }"
        assert kinds(src) == kinds(src) == ["unresolved-name", "unresolved-name"]


class TestAnalysis:
    def test_variant_locals_tracks_thread_dependence(self):
        src = ("kernel k(n: i32) { let t: i32 = threadIdx.x; "
               "let u: i32 = n; }")
        info = analyze(parse(src))
        assert "t" in info.variant_locals
        assert "u" not in info.variant_locals

    def test_local_types_recorded(self):
        src = "kernel k() { let v: f64 = 0.0; let w: i64 = 1; }"
        info = analyze(parse(src))
        assert info.local_types == {"v": "f64", "w": "i64"}
