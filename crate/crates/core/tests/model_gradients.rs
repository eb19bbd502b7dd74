use mgreid::backbone::Mode;
use mgreid::config::{BackboneConfig, HeadConfig};
use mgreid::graph::Graph;
use mgreid::image::Image;
use mgreid::model::Model;
use mgreid::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> BackboneConfig {
    BackboneConfig {
        image_height: 32,
        image_width: 16,
        patch_size: 8,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        num_cameras: 2,
        camera_weight: 3.0,
        stem_channels: 4,
        init_std: 0.3,
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let mut img = Image::new(h, w);
    for v in img.data.iter_mut() {
        *v = rng.random::<f32>();
    }
    img
}

/// Weighted sum of every output feature; the weights are fixed per test.
fn objective(model: &Model<f64>, images: &[&Image], cams: &[usize], w: &[Vec<f64>]) -> (f64, Graph<f64>, mgreid::model::ForwardOutput<f64>) {
    let mut g = Graph::new();
    let fwd = model.forward_graph(&mut g, images, cams, Mode::Train).unwrap();
    let mut outs = vec![fwd.head.global];
    outs.extend(fwd.head.parts.iter().copied());
    let mut total = 0.0;
    for (o, wo) in outs.iter().zip(w) {
        total += g.value(*o).data().iter().zip(wo).map(|(a, b)| a * b).sum::<f64>();
    }
    (total, g, fwd)
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = small_config();
    let mut model = Model::<f64>::new(cfg.clone(), HeadConfig::default(), 3).unwrap();
    let images: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 32, 16)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let cams = [0, 1, 1, 0];
    let n_out = 1 + model.num_parts();
    let w: Vec<Vec<f64>> = (0..n_out)
        .map(|_| (0..4 * cfg.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let (_, mut g, fwd) = objective(&model, &refs, &cams, &w);
    let mut outs = vec![fwd.head.global];
    outs.extend(fwd.head.parts.iter().copied());
    let grads_in: Vec<Tensor<f64>> = w.iter().map(|wo| Tensor::from_vec(&[4, cfg.embed_dim], wo.clone())).collect();
    let root = g.scalar_fn(&outs, 0.0, grads_in);
    let grads = g.backward(root);
    let analytic: Vec<(mgreid::params::ParamId, Tensor<f64>)> = g
        .param_vars()
        .into_iter()
        .filter_map(|(id, v)| grads.get(v).map(|t| (id, t.clone())))
        .collect();
    assert!(!analytic.is_empty());

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (id, grad) in &analytic {
        let name = model.store.entries()[id.index()].name.clone();
        let n = grad.len();
        for k in [0, n / 3, n / 2, n - 1] {
            let orig = model.store.get(*id).data()[k];
            model.store.get_mut(*id).data_mut()[k] = orig + h;
            let (fp, _, _) = objective(&model, &refs, &cams, &w);
            model.store.get_mut(*id).data_mut()[k] = orig - h;
            let (fm, _, _) = objective(&model, &refs, &cams, &w);
            model.store.get_mut(*id).data_mut()[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = grad.data()[k];
            let err = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-4);
            if err > worst.0 {
                worst = (err, format!("{name}[{k}] fd {fd:e} analytic {a:e}"));
            }
        }
    }
    println!("worst {:?}", worst);
    assert!(worst.0 < 1e-4, "{}", worst.1);
}
