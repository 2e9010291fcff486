//! Tree structure and selector invariants over random searches.

use arbor_core::rng::{stream, StreamRng};
use arbor_core::selector::{Action, ExpansionChoice, SelectorState};
use arbor_core::tree::{FeedbackRecord, SearchTree, ROOT};
use proptest::prelude::*;
use rand::Rng;

/// Runs `budget` expansions where each agent's rewards come from `reward`.
fn search(
    agents: usize,
    budget: usize,
    seed: u64,
    mut reward: impl FnMut(usize, &mut StreamRng) -> f64,
) -> (SearchTree, SelectorState, Vec<ExpansionChoice>) {
    let mut rng = stream(seed, "search-props");
    let mut tree = SearchTree::new(0);
    let mut sel = SelectorState::new(agents);
    let mut choices = Vec::new();
    for _ in 0..budget {
        let agent = sel.select_agent(&mut rng).unwrap();
        let choice = sel.descend_and_choose(&tree, agent, &mut rng).unwrap();
        choice.validate(&tree).unwrap();
        let r = reward(agent, &mut rng);
        let id = tree
            .append_node(choice.anchor_node_id, agent, vec![0], r, FeedbackRecord::empty())
            .unwrap();
        sel.register_node(agent, id);
        sel.update_posteriors(&choice, r).unwrap();
        choices.push(choice);
    }
    (tree, sel, choices)
}

fn fixed_arms(agent: usize, _: &mut StreamRng) -> f64 {
    if agent == 0 {
        0.9
    } else {
        0.1
    }
}

#[test]
fn better_agent_dominates_late_expansions() {
    let mut freq = 0.0;
    for seed in 0..20 {
        let (_, _, choices) = search(2, 1000, seed, fixed_arms);
        let late = &choices[500..];
        freq += late.iter().filter(|c| c.agent_id == 0).count() as f64 / late.len() as f64;
    }
    freq /= 20.0;
    assert!(freq > 0.8, "better-arm frequency {freq}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trees_are_append_only_and_partitioned(agents in 1usize..4, budget in 1usize..40, seed in any::<u64>()) {
        let (tree, _, choices) = search(agents, budget, seed, |_, rng| rng.random::<f64>());
        prop_assert_eq!(tree.len(), budget + 1);
        prop_assert_eq!(tree.expansions(), budget);
        for v in tree.expanded_nodes() {
            prop_assert!(v.parent_id.unwrap() < v.id);
            let p = v.parent_id.unwrap();
            let mut union = tree.siblings_excluding(v.id).unwrap();
            prop_assert!(!union.contains(&v.id));
            union.push(v.id);
            union.sort_unstable();
            let mut kids = tree.children(p).unwrap().to_vec();
            kids.sort_unstable();
            prop_assert_eq!(union, kids);
        }
        for c in &choices {
            match c.action {
                Action::Generate => prop_assert!(c.anchor_node_id == ROOT && c.refine_path.is_empty()),
                Action::Refine => prop_assert_eq!(c.refine_path.last(), Some(&c.anchor_node_id)),
            }
        }
    }

    #[test]
    fn posteriors_stay_positive(agents in 1usize..4, budget in 1usize..60, seed in any::<u64>()) {
        let (_, sel, _) = search(agents, budget, seed, |_, rng| match rng.random_range(0..3) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        });
        for j in 0..agents {
            let a = sel.agent_arm(j).unwrap();
            prop_assert!(a.alpha > 0.0 && a.beta > 0.0);
        }
        for (_, a) in sel.refine_arms().chain(sel.generate_arms()) {
            prop_assert!(a.alpha > 0.0 && a.beta > 0.0);
        }
    }

    #[test]
    fn equal_seeds_give_equal_choices(agents in 1usize..4, budget in 1usize..40, seed in any::<u64>()) {
        let a = search(agents, budget, seed, |j, _| (j as f64 + 1.0) / 4.0);
        let b = search(agents, budget, seed, |j, _| (j as f64 + 1.0) / 4.0);
        prop_assert_eq!(a.2, b.2);
        prop_assert_eq!(a.1, b.1);
    }
}
