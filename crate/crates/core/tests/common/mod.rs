#![allow(dead_code)]

use std::collections::BTreeSet;

use quase::srl_eval::LabeledSpan;

/// Every valid span scored in f64 from log-sum-exp, sorted best first.
pub fn exhaustive(start: &[f32], end: &[f32], max_len: usize) -> Vec<(f64, usize, usize)> {
    let lse = |x: &[f32]| x.iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
    let (zs, ze) = (lse(start), lse(end));
    let mut all = Vec::new();
    for s in 0..start.len() {
        for e in s + 1..=(s + max_len).min(start.len()) {
            all.push((start[s] as f64 - zs + end[e - 1] as f64 - ze, s, e));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all
}

/// Kept answers grouped by connected components of the intersection graph.
pub fn components_oracle(answers: &[LabeledSpan], golds: &[LabeledSpan]) -> Vec<LabeledSpan> {
    let kept: Vec<&LabeledSpan> = answers.iter().filter(|a| golds.iter().any(|g| a.intersects(g))).collect();
    let mut comp: Vec<usize> = (0..kept.len()).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..kept.len() {
            for j in 0..kept.len() {
                if kept[i].intersects(kept[j]) && comp[j] > comp[i] {
                    comp[j] = comp[i];
                    changed = true;
                }
            }
        }
    }
    let mut out: BTreeSet<LabeledSpan> = BTreeSet::new();
    for c in comp.iter().collect::<BTreeSet<_>>() {
        let members: Vec<_> = (0..kept.len()).filter(|&i| comp[i] == *c).map(|i| kept[i]).collect();
        let s = members.iter().map(|m| m.start).min().unwrap();
        let e = members.iter().map(|m| m.end).max().unwrap();
        out.insert(LabeledSpan::new(s, e));
    }
    out.into_iter().collect()
}
