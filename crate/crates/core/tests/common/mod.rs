//! Independent oracles shared by the acceptance suite and property tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mutmod_core::harness::fixtures::{GAZE_GIVEN_NO, GAZE_GIVEN_YES};
use mutmod_core::harness::gen::RandomNetwork;
use mutmod_core::inference::{Cpt, EvidenceSet};
use mutmod_core::SlotKey;

/// P(U = yes | gaze = g) for a prior on U, by Bayes' rule.
pub fn bayes_pointing(prior_yes: f64, gaze: usize) -> f64 {
    let yes = prior_yes * GAZE_GIVEN_YES[gaze];
    let no = (1.0 - prior_yes) * GAZE_GIVEN_NO[gaze];
    yes / (yes + no)
}

/// Posterior by summing the full joint, looking each factor up in the raw
/// CPT rows by parent labels.
pub fn brute_force(net: &RandomNetwork, evidence: &EvidenceSet, query: &SlotKey) -> Vec<f64> {
    let domains = net.domains();
    let slots: Vec<SlotKey> = domains.keys().cloned().collect();
    let cpt: BTreeMap<&SlotKey, &Cpt> = net.cpts.iter().map(|c| (&c.node, c)).collect();
    let qdom = &domains[query];
    let mut acc = vec![0.0; qdom.len()];
    let mut idx = vec![0usize; slots.len()];
    loop {
        let a: BTreeMap<&SlotKey, &String> = slots.iter().zip(&idx).map(|(s, &i)| (s, &domains[s][i])).collect();
        if evidence.iter().all(|(k, v)| a[k] == v) {
            let mut p = 1.0;
            for s in &slots {
                let c = cpt[s];
                let given: Vec<&String> = c.parents.iter().map(|pa| a[pa]).collect();
                let row = c
                    .rows
                    .iter()
                    .find(|r| r.given.iter().zip(&given).all(|(x, y)| x == *y))
                    .unwrap();
                let v = domains[s].iter().position(|l| l == a[s]).unwrap();
                p *= row.p[v];
            }
            let q = qdom.iter().position(|l| l == a[query]).unwrap();
            acc[q] += p;
        }
        // odometer over all assignments
        let mut k = 0;
        loop {
            if k == slots.len() {
                let z: f64 = acc.iter().sum();
                return acc.into_iter().map(|x| x / z).collect();
            }
            idx[k] += 1;
            if idx[k] < domains[&slots[k]].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Every (subset of other nodes, labelling of that subset).
pub fn evidence_sets(net: &RandomNetwork, query: &SlotKey) -> Vec<EvidenceSet> {
    let domains = net.domains();
    let mut sets = vec![EvidenceSet::new()];
    for (s, dom) in &domains {
        if s == query {
            continue;
        }
        let mut next = Vec::with_capacity(sets.len() * (dom.len() + 1));
        for e in &sets {
            next.push(e.clone());
            for l in dom {
                let mut e = e.clone();
                e.insert(s.clone(), l.clone());
                next.push(e);
            }
        }
        sets = next;
    }
    sets
}
