//! The three spatio-temporal token arrangements and the block that models
//! all of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stsmcd::blocks::{st_tokens_cross, st_tokens_parallel, st_tokens_sequential, StssBlock, VssConfig};
use stsmcd::nn::{Init, ParamStore};
use stsmcd::{Graph, Tensor};

fn main() -> stsmcd::Result<()> {
    let mut g = Graph::new();
    // tokens a1, a2 from the first epoch and b1, b2 from the second, one channel each
    let f1 = g.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0])?);
    let f2 = g.constant(Tensor::new(vec![2, 1], vec![10.0, 20.0])?);
    let seq = st_tokens_sequential(&mut g, f1, f2)?;
    let crs = st_tokens_cross(&mut g, f1, f2)?;
    let par = st_tokens_parallel(&mut g, f1, f2)?;
    println!("sequential {:?} {:?}", g.shape(seq), g.value(seq).data());
    println!("cross      {:?} {:?}", g.shape(crs), g.value(crs).data());
    println!("parallel   {:?} {:?}", g.shape(par), g.value(par).data());

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = VssConfig {
        state: 4,
        ..VssConfig::default()
    };
    let block = StssBlock::new(&mut Init::new(&mut store, &mut rng), "stss", 8, &cfg);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x1 = g.constant(Tensor::uniform(&[4, 4, 8], -1.0, 1.0, &mut rng));
    let x2 = g.constant(Tensor::uniform(&[4, 4, 8], -1.0, 1.0, &mut rng));
    let y = block.forward(&mut g, &p, x1, x2)?;
    println!("STSS block: two {:?} maps -> {:?}", g.shape(x1), g.shape(y));
    Ok(())
}
