//! Rule-family order independence of the resolve fixpoint on small trees.

use earlystop::eig::{InfoTree, NodeLabel, ProcessSet, ResolveTree, Value};
use earlystop::resolve::{resolve_fixpoint_ordered, RoundCtx, Sweep};
use proptest::prelude::*;

const N: usize = 4;
const T: usize = 1;

fn labels_to_depth(depth: usize) -> Vec<NodeLabel> {
    let mut out = vec![NodeLabel::ROOT];
    let mut frontier = vec![NodeLabel::ROOT];
    for _ in 0..depth {
        let next: Vec<NodeLabel> = frontier.iter().flat_map(|l| l.children(N)).collect();
        out.extend(next.iter().copied());
        frontier = next;
    }
    out
}

fn permutations(items: &[Sweep]) -> Vec<Vec<Sweep>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn value_strategy() -> impl Strategy<Value = Value> {
    prop_oneof![Just(Value::Val(0)), Just(Value::Val(1)), Just(Value::Bottom)]
}

fn final_values(it: &InfoTree, order: &[Sweep], faulty: ProcessSet, round: u32) -> Vec<Option<Value>> {
    let mut it = it.clone();
    let mut rt = ResolveTree::new();
    let ctx = RoundCtx::new(N, T, T, round, faulty);
    resolve_fixpoint_ordered(&mut it, &mut rt, &ctx, order).expect("fixpoint converges");
    labels_to_depth(round as usize).iter().map(|l| rt.value(l)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// Final RT values after the last round agree under every ordering of
    /// the resolve families.
    #[test]
    fn final_round_resolution_is_order_independent(
        values in proptest::collection::vec(value_strategy(), 1 + N + N * (N - 1)),
        faulty in proptest::option::of(0u8..N as u8),
    ) {
        let mut it = InfoTree::new();
        for (label, v) in labels_to_depth(2).into_iter().zip(values) {
            it.set(label, v);
        }
        let faulty: ProcessSet = faulty.into_iter().collect();
        let families = [Sweep::It, Sweep::LastRound, Sweep::Gc, Sweep::Rgc, Sweep::S, Sweep::SRoot];
        let mut reference = None;
        for mut order in permutations(&families) {
            order.push(Sweep::Closing);
            let got = final_values(&it, &order, faulty, 2);
            match &reference {
                None => reference = Some(got),
                Some(r) => prop_assert_eq!(r, &got, "order {:?}", order),
            }
        }
    }
}
