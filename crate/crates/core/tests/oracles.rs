use autoda::oracle::{Halfspace, Layer, Mlp, Oracle};
use autoda::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

fn normal(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn single_layer_mlp_matches_halfspace() {
    let mut rng = stream(21, &[]);
    let dir = tempfile::tempdir().unwrap();
    for (trial, dim) in [1usize, 3, 16].into_iter().enumerate() {
        let w = normal(dim, &mut rng);
        let b: f64 = rng.random_range(-1.0..1.0);
        let mut weights = vec![0.0; dim];
        weights.extend(&w);
        let net = Mlp::new(vec![Layer { rows: 2, cols: dim, weights, bias: vec![0.0, b] }]).unwrap();
        let path = dir.path().join(format!("net{trial}.txt"));
        std::fs::write(&path, net.format()).unwrap();
        let mlp = Oracle::from_spec(&format!("mlp:path={};benign=0", path.display())).unwrap();
        let half = Oracle::new(Halfspace { w, b });
        let mut adversarial = 0;
        for _ in 0..1000 {
            let x = normal(dim, &mut rng);
            let want = half.query(&x).unwrap();
            assert_eq!(mlp.query(&x).unwrap(), want, "dim {dim}, x {x:?}");
            adversarial += want as usize;
        }
        // both labels are exercised
        assert!((10..990).contains(&adversarial), "{adversarial}");
        assert_eq!(mlp.queries(), 1000);
    }
}

#[test]
fn counter_is_exact_across_threads() {
    let oracle = Oracle::from_spec("sphere:dim=4;r=1").unwrap();
    std::thread::scope(|s| {
        for t in 0..8u64 {
            let oracle = &oracle;
            s.spawn(move || {
                let mut rng = stream(22, &[t]);
                for _ in 0..10_000 + t {
                    oracle.query(&normal(4, &mut rng)).unwrap();
                }
            });
        }
    });
    assert_eq!(oracle.queries(), 80_000 + (0..8).sum::<u64>());
}

#[test]
fn labels_do_not_depend_on_query_order() {
    let oracle = Oracle::from_spec("halfspace:w=1,-2,0.5;b=0.25").unwrap();
    let mut rng = stream(23, &[]);
    let points: Vec<Vec<f64>> = (0..500).map(|_| normal(3, &mut rng)).collect();
    let first: Vec<bool> = points.iter().map(|x| oracle.query(x).unwrap()).collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);
    for i in order {
        assert_eq!(oracle.query(&points[i]).unwrap(), first[i]);
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let oracle = Oracle::from_spec("halfspace:dim=3").unwrap();
    assert!(oracle.query(&[1.0, 0.0]).is_err());
}
