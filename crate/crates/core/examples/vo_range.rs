//! Virtual-object sharing success against viewing angle on the half-circle
//! room, grid-linked objects against keyframe-linked ones.

use ecar::server::SyncMode;
use ecar::sim::range::{measure_vo_range, RangeConfig, RangeScenario};

fn main() {
    let cfg = RangeConfig { trials: 5, ..RangeConfig::for_scenario(RangeScenario::HalfCircle) };
    let ecar = measure_vo_range(RangeScenario::HalfCircle, SyncMode::Ecar, &cfg);
    let kfvo = measure_vo_range(RangeScenario::HalfCircle, SyncMode::KfVo, &cfg);
    println!("angle  ecar  kfvo");
    for (a, b) in ecar.iter().zip(&kfvo) {
        println!("{:5.0}  {:4.0}  {:4.0}", a.station, 100.0 * a.rate(), 100.0 * b.rate());
    }
}
