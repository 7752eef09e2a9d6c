//! Finite-difference checks of a custom graph, a built-in suite scope, and
//! the negative control with a deliberately corrupted backward rule.

use stsmcd::gradcheck::{check_primitive, grad_check, run_suite, GradCheckOptions, Scope};
use stsmcd::graph::with_corrupted_backward;
use stsmcd::{PrimitiveKind, Tensor};

fn main() -> stsmcd::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, -0.1, 0.5])?;
    let w = Tensor::new(vec![3, 2], vec![0.5, -0.4, 0.1, 0.9, -0.7, 0.2])?;
    let report = grad_check(
        "softplus(xw) summed",
        &[x, w],
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.softplus(y)?;
            g.sum(y)
        },
        GradCheckOptions::PRIMITIVE,
    )?;
    println!("{report}");

    for r in run_suite(&Scope::Blocks)? {
        println!("{r}");
    }

    let corrupted = with_corrupted_backward(PrimitiveKind::Softmax, || check_primitive(PrimitiveKind::Softmax))?;
    for r in corrupted {
        println!("corrupted softmax backward -> {r}");
    }
    Ok(())
}
