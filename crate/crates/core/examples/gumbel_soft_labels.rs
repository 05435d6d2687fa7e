//! Gumbel-softmax relaxation of the nearest-code assignment at several
//! temperatures, with and without noise.

use birq::matrix::Matrix;
use birq::quantizer;

fn main() -> birq::error::Result<()> {
    let codebook = quantizer::init_codebook(1, 8, 4)?;
    let u = Matrix::from_fn(200, 4, |t, j| ((t * 7 + j * 3) as f64 * 0.37).sin() * 2.0);
    let hard = quantizer::assign_hard(&u, &codebook)?;
    let noise = quantizer::sample_gumbel(3, u.rows(), codebook.size());

    println!("{:>8} {:>10} {:>12} {:>10} {:>12}", "tau", "agree", "mass", "agree+g", "mass+g");
    for tau in [1e-3, 0.1, 0.5, 1.0, 5.0] {
        let stats = |noise| -> birq::error::Result<(f64, f64)> {
            let soft = quantizer::assign_soft(&u, &codebook, tau, noise)?;
            let agree = soft.argmax().iter().zip(hard.indices()).filter(|(a, b)| a == b).count();
            let mass: f64 = hard.indices().iter().enumerate().map(|(t, &i)| soft.rows().get(t, i)).sum();
            Ok((agree as f64 / u.rows() as f64, mass / u.rows() as f64))
        };
        let (a, m) = stats(None)?;
        let (ag, mg) = stats(Some(&noise))?;
        println!("{tau:>8} {a:>10.3} {m:>12.6} {ag:>10.3} {mg:>12.6}");
    }
    Ok(())
}
