//! Gradients of gradients on the tape.
//!
//! Everything in this crate rests on one property of the autodiff engine:
//! a backward sweep can itself be recorded, so its outputs are ordinary
//! differentiable nodes. This example differentiates f(x) = x^3 three times
//! and checks each level against the closed form.
//!
//! Run with: `cargo run --example higher_order_autodiff`

use cond_maml::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(1.5), true);

    // f(x) = x * x * x
    let x2 = g.mul(x, x)?;
    let f = g.mul(x2, x)?;

    // First derivative: request a graph-building sweep so the result is
    // itself differentiable.
    let df = g.gradient(f, &[x], true)?[0];
    // Second derivative: differentiate the derivative the same way.
    let d2f = g.gradient(df, &[x], true)?[0];
    // Third derivative: the last sweep does not need to build more graph.
    let d3f = g.gradient(d2f, &[x], false)?[0];

    let v = 1.5_f64;
    println!("f(x)    = x^3        at x = {v}");
    println!("f(x)    = {:>8.4}   (expect {:.4})", g.scalar_value(f), v.powi(3));
    println!("f'(x)   = {:>8.4}   (expect {:.4})", g.scalar_value(df), 3.0 * v * v);
    println!("f''(x)  = {:>8.4}   (expect {:.4})", g.scalar_value(d2f), 6.0 * v);
    println!("f'''(x) = {:>8.4}   (expect {:.4})", g.scalar_value(d3f), 6.0);

    assert!((g.scalar_value(df) - 3.0 * v * v).abs() < 1e-12);
    assert!((g.scalar_value(d2f) - 6.0 * v).abs() < 1e-12);
    assert!((g.scalar_value(d3f) - 6.0).abs() < 1e-12);

    // The same mechanism composes across ops. d/dx [exp(x^2)] twice:
    let y = g.mul(x, x)?;
    let h = g.exp(y)?;
    let dh = g.gradient(h, &[x], true)?[0];
    let d2h = g.gradient(dh, &[x], false)?[0];
    let e = (v * v).exp();
    println!();
    println!("h(x)    = exp(x^2)");
    println!("h''(x)  = {:>8.4}   (expect {:.4})", g.scalar_value(d2h), (2.0 + 4.0 * v * v) * e);
    assert!((g.scalar_value(d2h) - (2.0 + 4.0 * v * v) * e).abs() < 1e-9);

    println!();
    println!("ok: the tape differentiates its own backward passes");
    Ok(())
}
