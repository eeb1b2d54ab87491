mod common;

use privinv::asm::parse;
use privinv::rewriter::{rewrite, RewriteOptions};
use privinv::verifier::{verify, VerifyPolicy};

use common::{corpus, mutate, random_program, Mutation};

fn rewritten() -> Vec<(String, privinv::asm::Program)> {
    let mut all: Vec<_> = corpus();
    for seed in 0..40 {
        all.push((format!("random {seed}"), parse(&random_program(seed)).unwrap()));
    }
    all.into_iter().map(|(n, p)| (n, rewrite(&p, &RewriteOptions::default()).unwrap())).collect()
}

#[test]
fn each_mutation_class_trips_its_rule() {
    let progs = rewritten();
    for m in Mutation::ALL {
        let mut applied = 0;
        for (name, p) in &progs {
            for nth in 0..3 {
                let Some(bad) = mutate(p, m, nth) else { break };
                applied += 1;
                let v = verify(&bad, VerifyPolicy::Full);
                assert!(v.iter().any(|v| v.rule == m.rule()), "{} on {name}#{nth}: {v:?}", m.name());
            }
        }
        assert!(applied >= 10, "{} applied only {applied} times", m.name());
    }
}
