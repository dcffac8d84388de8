//! Random small programs for checker and simulator properties.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROLES: [&str; 3] = ["a", "b", "c"];
const OPS: [&str; 3] = ["p", "q", "r"];

struct Gen {
    rng: ChaCha8Rng,
    roles: usize,
    actions: usize,
    used: BTreeSet<&'static str>,
    fresh: usize,
}

impl Gen {
    fn role(&mut self) -> &'static str {
        let r = ROLES[self.rng.random_range(0..self.roles)];
        self.used.insert(r);
        r
    }

    fn lit(&mut self) -> String {
        match self.rng.random_range(0..3) {
            0 => self.rng.random_range(0..10).to_string(),
            1 => if self.rng.random_bool(0.5) { "true".into() } else { "false".into() },
            _ => format!("\"s{}\"", self.rng.random_range(0..3)),
        }
    }

    fn var(&mut self) -> String {
        self.fresh += 1;
        format!("v{}", self.fresh)
    }

    fn action(&mut self) -> String {
        self.actions -= 1;
        if self.roles > 1 && self.rng.random_bool(0.7) {
            let s = self.role();
            let mut r = self.role();
            while r == s {
                r = ROLES[self.rng.random_range(0..self.roles)];
            }
            self.used.insert(r);
            let op = OPS[self.rng.random_range(0..OPS.len())];
            let (lit, var) = (self.lit(), self.var());
            format!("{op}: {s}( {lit} ) -> {r}( {var} )")
        } else {
            let r = self.role();
            let (var, lit) = (self.var(), self.lit());
            format!("{var}@{r} = {lit}")
        }
    }

    /// Two subtrees sharing the remaining budget, each getting at least one action.
    fn pair(&mut self, depth: u32) -> (String, String) {
        let total = self.actions;
        let left = self.rng.random_range(1..total);
        self.actions = left;
        let a = self.behaviour(depth - 1);
        self.actions += total - left;
        let b = self.behaviour(depth - 1);
        (a, b)
    }

    fn behaviour(&mut self, depth: u32) -> String {
        if self.actions <= 1 || depth == 0 || self.rng.random_bool(0.15) {
            return self.action();
        }
        match self.rng.random_range(0..10) {
            0..=3 => {
                let (a, b) = self.pair(depth);
                format!("{a}; {b}")
            }
            4 | 5 => {
                let (a, b) = self.pair(depth);
                format!("{{ {a} | {b} }}")
            }
            6 | 7 => {
                let r = self.role();
                let g = if self.rng.random_bool(0.5) { "true" } else { "false" };
                if self.rng.random_bool(0.5) {
                    let (a, b) = self.pair(depth);
                    format!("if( {g} )@{r} {{ {a} }} else {{ {b} }}")
                } else {
                    let a = self.behaviour(depth - 1);
                    format!("if( {g} )@{r} {{ {a} }}")
                }
            }
            8 => {
                let r = self.role();
                let a = self.behaviour(depth - 1);
                let k = self.rng.random_range(0..3);
                format!("scope @{r} {{ {a} }} prop {{ N.k = {k} }}")
            }
            _ => {
                let r = self.role();
                let a = self.behaviour(depth - 1);
                format!("while( false )@{r} {{ {a} }}")
            }
        }
    }
}

/// A random program with at most `max_actions` assignments and
/// interactions over at most `max_roles` roles. Expressions are literals,
/// so every run is free of evaluation errors.
pub fn random_program(seed: u64, max_actions: usize, max_roles: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Mostly multi-role and near the action budget; trivial programs say little.
    let max_roles = max_roles.min(ROLES.len());
    let roles = if max_roles > 1 && rng.random_bool(0.9) { rng.random_range(2..=max_roles) } else { 1 };
    let actions = rng.random_range(max_actions.div_ceil(2).max(1)..=max_actions);
    let mut g = Gen {
        rng,
        roles,
        actions,
        used: BTreeSet::new(),
        fresh: 0,
    };
    let body = g.behaviour(4);
    // The role of the earliest event in the text.
    let starter = ROLES
        .iter()
        .filter_map(|r| [format!(" {r}( "), format!("@{r}")].iter().filter_map(|pat| body.find(pat.as_str())).min().map(|i| (i, *r)))
        .min()
        .map_or("a", |(_, r)| r);
    format!("preamble {{ starter: {starter} }}\naioc {{ {body} }}\n")
}
