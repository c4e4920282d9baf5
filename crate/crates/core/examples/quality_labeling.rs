//! Maps MOS values to quality levels under the default two-level policy and
//! a finer three-level one.

use qamo::data::{quality_label, QualityPolicy};

fn main() -> qamo::Result<()> {
    let policies = [
        ("default (tau = 2.5)", QualityPolicy::default()),
        ("three levels", QualityPolicy::new(vec![2.0, 3.5])?),
    ];
    for (name, policy) in &policies {
        println!("{name}: {} levels", policy.num_levels());
        for mos in [1.0, 1.9, 2.0, 2.49, 2.5, 3.5, 4.2, 5.0] {
            println!("  MOS {mos:>4} -> level {}", quality_label(mos, policy)?);
        }
    }
    Ok(())
}
