//! The four traversal orders of a 2D map and the SS2D unit built on them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stsmcd::nn::{Init, ParamStore};
use stsmcd::scan2d::{cross_scan_expand, cross_scan_merge, Direction, Ss2d};
use stsmcd::ssm::Discretization;
use stsmcd::{Graph, Tensor};

fn main() -> stsmcd::Result<()> {
    let (h, w) = (3, 4);
    let map = Tensor::from_fn(&[h, w, 1], |i| (i + 1) as f64);
    let seqs = cross_scan_expand(&map)?;
    for (dir, seq) in Direction::ALL.iter().zip(&seqs) {
        println!("{dir:?}: {:?}", seq.data());
    }
    let merged = cross_scan_merge(&seqs, h, w)?;
    println!("merge(expand(x)) / 4 = {:?}", merged.data().iter().map(|v| v / 4.0).collect::<Vec<_>>());

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ss2d = Ss2d::new(&mut Init::new(&mut store, &mut rng), "ss2d", 4, 4, Discretization::default(), true);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::uniform(&[8, 8, 4], -1.0, 1.0, &mut rng));
    let y = ss2d.forward(&mut g, &p, x)?;
    println!("SS2D: {:?} -> {:?} with {} parameters", g.shape(x), g.shape(y), store.num_scalars());
    Ok(())
}
