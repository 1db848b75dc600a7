// temporary diagnostic: is the 8x8 mismatch specific to attention?
use conceptlab::nn::{CondUnet, NetworkSpec, Parameterized};
use conceptlab::diffusion::{make_schedule, noise_prediction_mse};
use conceptlab::rng::substream;
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() {
    for (use_attention, label) in [(false, "no-attn"), (true, "attn")] {
        let spec = NetworkSpec {
            base_channels: 2,
            channel_multipliers: (1, 2),
            use_attention,
            cond_embed_dim: 2,
            time_embed_dim: 4,
        };
        let schedule = make_schedule(10, 1e-3, 0.2).unwrap();
        let mut init = substream(11, "gradcheck.init", 0);
        let mut net = CondUnet::new(spec, 3, &mut init);
        let n_params = net.param_count();
        let mut rng = substream(12, "gradcheck.data", 0);
        let bsz = 2;
        let side = 8;
        let x0 = Array4::from_shape_fn((bsz, 3, side, side), |_| rng.gen_range(-1.0f32..1.0));
        let conds = Array2::from_shape_fn((bsz, 3), |(b, j)| ((b + j) % 2) as f32);
        let ts = vec![2usize, 7];
        let eps = Array4::from_shape_fn((bsz, 3, side, side), |_| rng.sample::<f32, _>(StandardNormal));
        net.zero_grad();
        let _ = noise_prediction_mse(&mut net, &schedule, &x0, &conds, &ts, &eps, true);
        let mut analytic = Vec::new();
        let mut names = Vec::new();
        net.visit_params(&mut |p| { for (i,g) in p.grad.iter().enumerate() { analytic.push(*g); names.push(format!("{}[{}]", p.name, i)); } });

        fn nudge(net: &mut CondUnet, i: usize, delta: f32) {
            let mut k = 0usize;
            net.visit_params(&mut |p| {
                if i >= k && i < k + p.data.len() { p.data[i - k] += delta; }
                k += p.data.len();
            });
        }
        let h = 3e-3f32;
        let mut worst = (0usize, 0.0f64);
        let mut fd = vec![0.0f32; n_params];
        for i in 0..n_params {
            nudge(&mut net, i, h);
            let up = noise_prediction_mse(&mut net, &schedule, &x0, &conds, &ts, &eps, false);
            nudge(&mut net, i, -2.0*h);
            let dn = noise_prediction_mse(&mut net, &schedule, &x0, &conds, &ts, &eps, false);
            nudge(&mut net, i, h);
            fd[i] = ((up - dn) / (2.0 * h as f64)) as f32;
            let d = (fd[i] - analytic[i]).abs() as f64;
            if d > worst.1 { worst = (i, d); }
        }
        let na: f64 = analytic.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        let nf: f64 = fd.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| ((*a - *b) as f64).powi(2)).sum::<f64>().sqrt();
        println!("{label}: {n_params} params rel {:.3e} | worst {} fd={:.5} an={:.5}",
                 diff / na.max(nf), names[worst.0], fd[worst.0], analytic[worst.0]);
    }
}
