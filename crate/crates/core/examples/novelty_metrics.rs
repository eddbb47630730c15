//! Novelty and realism of a "model" over all 3x3 binary images, as observers
//! remember more and more of what it produced.
//!
//!     cargo run --release --example novelty_metrics

use diffusion_core::novelty_metrics::{
    model_realism, novelty_rates, Classifier, Matcher, ModelOutputSet, Population, Rate, Universe,
};
use diffusion_core::NoiseRng;

fn main() -> diffusion_core::Result<()> {
    let u = Universe::binary_grid(3, 3)?.with_classes(|_| 0);
    let mut rng = NoiseRng::new(4);
    let produced: Vec<u64> = (0..200).map(|_| rng.below(600)).collect();
    let outputs = ModelOutputSet::partition(&u, produced.iter().copied());
    println!("{} outputs: {} distinct realistic, {} outside", outputs.total(), outputs.distinct_inside().len(), outputs.outside);

    let mut obs = Population::synthetic(&u, 4, 30, Matcher::Hamming { radius: 1 }, 9)?;
    for (k, o) in obs.observers.iter_mut().enumerate() {
        o.classifiers.insert(0, Classifier::MinOnes { k: 3 + k });
    }
    println!("model realism R_M = {:.3}", model_realism(&u, &obs, &outputs, 0)?);

    // each round, the first observer looks at 25 more of the model's outputs
    let inside: Vec<u64> = outputs.inside.clone();
    for round in 0..=4 {
        let r = novelty_rates(&u, &obs, &outputs)?;
        let show = |x: Rate| x.map_or("undefined".into(), |q| format!("{q} ({:.3})", *q.numer() as f64 / *q.denom() as f64));
        println!(
            "round {round}: |J_O| = {:>3}  N_IO = {}  N_M = {}  N_MO = {}  relation {}",
            r.new_items,
            show(r.intrinsic_novelty),
            show(r.relative_novelty),
            show(r.absolute_novelty),
            if r.relation_holds() { "exact" } else { "n/a" }
        );
        obs.observers[0].memory.extend(inside.iter().skip(round * 25).take(25));
    }
    Ok(())
}
