import pytest

from conftest import fingerprints_per_step, run_src
from progen import random_program

from dartvm import VM, lang
from dartvm.errors import DartError, VMError
from dartvm.heap import Ref


def test_push_statement_advances_index():
    vm = VM(lang.parse("let x = []\npush x 7"), 1)
    vm.step()
    vm.step()
    assert vm.frames[0].bindings["x"] == Ref(1)
    assert vm.heap.node(1).data == [7]
    assert vm.statement_index == 2


def test_failed_statement_rolls_back_byte_identical():
    vm = VM(lang.parse("let x = [1]\nset x[5] = 0\nlet y = 2"), 1)
    vm.step()
    before = vm.state_fingerprint()
    data_before = list(vm.heap.node(1).data)
    counter_before = vm.heap.node(1).mutation_counter
    with pytest.raises(VMError) as exc:
        vm.step()
    assert exc.value.kind == "IndexOutOfRange"
    assert vm.state_fingerprint() == before
    assert vm.heap.node(1).data == data_before
    assert vm.heap.node(1).mutation_counter == counter_before
    assert vm.statement_index == 1


def test_aliasing_shares_the_object():
    vm = run_src("let x = [1]\nlet y = x\npush y 2")
    assert vm.frames[0].bindings["x"] == vm.frames[0].bindings["y"]
    oid = vm.frames[0].bindings["x"].oid
    assert vm.heap.node(oid).data == [1, 2]


def test_empty_main_finishes_at_zero():
    vm = VM(lang.parse("# nothing\n"), 1)
    assert vm.finished
    assert vm.statement_index == 0
    assert vm.frames[0].bindings == {}


def test_same_program_same_seed_identical_fingerprint_trace():
    src = random_program(1234, statements=40)
    assert fingerprints_per_step(src, 5) == fingerprints_per_step(src, 5)


def test_rand_seeds_diverge():
    src = "let a = rand()\nlet b = rand()"
    assert run_src(src, 1).state_fingerprint() != run_src(src, 2).state_fingerprint()


def test_determinism_across_many_random_programs():
    for seed in range(12):
        src = random_program(seed, statements=30)
        assert fingerprints_per_step(src, seed) == fingerprints_per_step(src, seed)


# -- statement atomicity under injected failures ------------------------------

FAILING = [
    ("set xs[99] = 0", "IndexOutOfRange"),
    ("let z = 1 / 0", "DivisionByZero"),
    ("let z = nope", "UnknownName"),
    ("push b 1", "KindMismatch"),
    ('del m["missing"]', "IndexOutOfRange"),
    ("let z = nofn(1)", "UnknownName"),
]


@pytest.mark.parametrize("bad,kind", FAILING)
def test_injected_failures_leave_state_unchanged(bad, kind):
    setup = 'let xs = [1, 2]\nlet m = {"a": 1}\nlet b = blob(8, 1)\nlet f = rand()\n'
    vm = VM(lang.parse(setup + bad), 3)
    while vm.statement_index < 4:
        vm.step()
    before = vm.state_fingerprint()
    with pytest.raises(VMError) as exc:
        vm.step()
    assert exc.value.kind == kind
    assert vm.state_fingerprint() == before


def test_failure_inside_expression_call_rolls_back_partial_effects():
    # f pushes to a global list, then the enclosing statement fails; the
    # pushes must vanish with the rollback
    src = """
fn f(n) {
  push acc n
  let f = n
}
let acc = []
let y = f(1) + (1 / 0)
"""
    vm = VM(lang.parse(src), 1)
    vm.step()  # let acc
    before = vm.state_fingerprint()
    with pytest.raises(VMError) as exc:
        vm.step()
    assert exc.value.kind == "DivisionByZero"
    assert vm.state_fingerprint() == before
    assert vm.heap.node(vm.frames[0].bindings["acc"].oid).data == []


def test_rng_draws_roll_back_with_failed_statement():
    vm = VM(lang.parse("let a = rand()\nlet b = rand() + (1 / 0)\nlet c = rand()"), 9)
    vm.step()
    draws_before = vm.rng.draw_count
    with pytest.raises(VMError):
        vm.step()
    assert vm.rng.draw_count == draws_before


# -- log and replay ----------------------------------------------------------

def test_log_completeness_and_replay():
    src = random_program(77, statements=25)
    vm = VM(lang.parse(src), 4)
    fps = [vm.state_fingerprint()]
    while not vm.finished:
        vm.step()
        fps.append(vm.state_fingerprint())
    assert vm.statement_index == len(vm.statement_log)
    assert [e.index for e in vm.statement_log] == list(range(1, vm.statement_index + 1))
    for target in (0, 1, vm.statement_index // 2, vm.statement_index):
        fresh = VM(lang.parse(src), 4)
        while fresh.statement_index < target:
            fresh.step()
        assert fresh.state_fingerprint() == fps[target]


def test_hook_exceptions_do_not_disturb_execution():
    src = "let x = [1]\nrepeat 5 { push x 0 }"
    plain = run_src(src, 1).state_fingerprint()

    def bad_hook(vm):
        raise RuntimeError("boom")

    vm = VM(lang.parse(src), 1).run(hook=bad_hook)
    assert vm.state_fingerprint() == plain
    assert vm.hook_failures == vm.statement_index


# -- functions -----------------------------------------------------------------

def test_pascal_style_result():
    vm = run_src("fn double(x) { let double = x * 2 }\nlet y = double(21)")
    assert vm.frames[0].bindings["y"] == 42


def test_missing_result_binding_raises():
    vm = VM(lang.parse("fn f(x) { let t = x }\nlet y = f(1)"), 1)
    with pytest.raises(VMError) as exc:
        vm.step()
    assert exc.value.kind == "UnknownName"


def test_statement_call_executes_framewise():
    src = """
fn grow(n) {
  push acc n
  push acc n
}
let acc = []
call grow(3)
let done = 1
"""
    vm = VM(lang.parse(src), 1)
    vm.step()  # let acc
    vm.step()  # call -> frame push
    assert len(vm.frames) == 2
    assert vm.frames[1].function_name == "grow"
    vm.step()  # first push inside grow
    assert len(vm.frames) == 2
    vm.run()
    assert vm.heap.node(vm.frames[0].bindings["acc"].oid).data == [3, 3]
    # call entry + 2 pushes + let acc + let done
    assert vm.statement_index == 5


def test_recursion_limit():
    src = "fn f(n) { let f = f(n + 1) }\nlet y = f(0)"
    vm = VM(lang.parse(src), 1)
    with pytest.raises(VMError) as exc:
        vm.step()
    assert exc.value.kind == "RecursionLimit"


def test_function_args_by_value_for_scalars_by_ref_for_objects():
    src = """
fn mutate(lst, n) {
  push lst n
  let mutate = n
}
let xs = []
let y = mutate(xs, 5)
"""
    vm = run_src(src)
    assert vm.heap.node(vm.frames[0].bindings["xs"].oid).data == [5]


# -- repeat handling ----------------------------------------------------------

def test_repeat_zero_and_empty_bodies():
    vm = run_src("let x = []\nrepeat 0 { push x 1 }\nrepeat 3 { }\npush x 9")
    assert vm.heap.node(vm.frames[0].bindings["x"].oid).data == [9]


def test_nested_repeat_counts():
    vm = run_src("let x = []\nrepeat 2 { repeat 3 { push x 0 } }")
    assert len(vm.heap.node(vm.frames[0].bindings["x"].oid).data) == 6


def test_repeat_count_must_be_nonnegative_int():
    vm = VM(lang.parse("repeat -1 { let a = 1 }"), 1)
    with pytest.raises(VMError) as exc:
        vm.step()
    assert exc.value.kind == "KindMismatch"
    vm2 = VM(lang.parse("repeat 1.5 { let a = 1 }"), 1)
    with pytest.raises(VMError):
        vm2.step()


def test_repeat_count_consuming_rng_draw_is_one_statement():
    # rand() < 1 always, so this repeats 0 times; the count draw must be
    # atomic with the loop entry
    vm = run_src("let n = 2\nrepeat n { let pad = 0 }")
    assert vm.statement_index == 4  # let + repeat entry + 2 pads


def test_int_arithmetic_wraps_to_64_bits():
    vm = run_src("let big = 9223372036854775807\nlet wrapped = big + 1")
    assert vm.frames[0].bindings["wrapped"] == -9223372036854775808


def test_division_semantics():
    vm = run_src("let a = 7 / 2\nlet b = -7 / 2\nlet c = 7.0 / 2")
    assert vm.frames[0].bindings["a"] == 3
    assert vm.frames[0].bindings["b"] == -4  # floor division
    assert vm.frames[0].bindings["c"] == 3.5


def test_step_after_finish_is_an_error():
    vm = run_src("let x = 1")
    with pytest.raises(DartError):
        vm.step()


def test_del_var_then_rebind_moves_to_end():
    vm = run_src("let a = 1\nlet b = 2\ndel a\nlet a = 3")
    assert list(vm.frames[0].bindings) == ["b", "a"]


def test_blob_contents_deterministic_per_seed_and_tag():
    v1 = run_src("let b = blob(32, 7)", seed=1)
    v2 = run_src("let b = blob(32, 7)", seed=1)
    v3 = run_src("let b = blob(32, 7)", seed=2)
    d1 = bytes(v1.heap.node(v1.frames[0].bindings["b"].oid).data)
    d2 = bytes(v2.heap.node(v2.frames[0].bindings["b"].oid).data)
    d3 = bytes(v3.heap.node(v3.frames[0].bindings["b"].oid).data)
    assert d1 == d2
    assert d1 != d3
