//! Turn holistic candidate scores into adaptive weights and compare them with
//! the uniform weights used when weighting is switched off.

use c2f::holistic::HolisticScoreList;
use c2f::weighting::{make_weights, uniform_weights};

fn main() -> c2f::Result<()> {
    let scores = HolisticScoreList::from_unsorted(vec![(7, 0.62), (3, 0.95), (12, 0.71), (5, 0.60), (9, 0.88)]);
    let adaptive = make_weights(&scores);
    let uniform = uniform_weights(&scores);
    println!("{:>5} {:>9} {:>9} {:>9}", "id", "cosine", "adaptive", "uniform");
    for (a, u) in adaptive.entries().iter().zip(uniform.entries()) {
        println!("{:>5} {:>9.3} {:>9.4} {:>9.4}", a.image_id, a.holistic_score, a.weight, u.weight);
    }
    let total: f64 = adaptive.weights().iter().sum();
    println!("sum of adaptive weights = {total:.12}");

    let tied = HolisticScoreList::from_unsorted(vec![(1, 0.5), (2, 0.5), (3, 0.5)]);
    println!("equal scores -> {:?}", make_weights(&tied).weights());
    Ok(())
}
