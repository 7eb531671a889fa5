use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn random_structured(n: usize, rank: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 2.0 + rng.random::<f64>();
        if i + 1 < n {
            m[(i, i + 1)] = -0.5;
            m[(i + 1, i)] = -0.5;
        }
    }
    let u = DMatrix::from_fn(n, rank, |_, _| rng.random::<f64>() - 0.5);
    let v = DMatrix::from_fn(n, rank, |_, _| rng.random::<f64>() - 0.5);
    m + u * v.transpose() * 0.1
}

#[test]
fn debug_sketch_stages() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    let m = random_structured(600, 9, &mut rng);
    let block = m.view((0, 300), (300, 300)).clone_owned();
    // replicate the compress_block seed: (r0=0) << 32 ^ (c0=0) << 8 ^ n=600
    let seed = 600u64;
    let mut srng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let p = 32;
    let omega = DMatrix::from_fn(300, p, |_, _| StandardNormal.sample(&mut srng));
    let y = &block * &omega;
    let y = &block * (block.tr_mul(&y));
    let q = y.qr().q();
    let c = q.tr_mul(&block);
    let remainder = (&block - &q * &c).norm();
    println!("remainder {remainder:.3e}");
    // svd of block for reference
    let sv_exact = block.clone().singular_values();
    println!("block sigma 9..14: {:?}", (8..14).map(|i| sv_exact[i]).collect::<Vec<_>>());

    // direct: col_piv_qr of C and check stage errors
    let qr = c.clone().col_piv_qr();
    let r = qr.r();
    let k0 = (0..r.nrows().min(r.ncols())).take_while(|&i| r[(i, i)].abs() > 0.5e-10 * 1e-2 / (300f64).sqrt()).count();
    println!("k0 = {k0}");
    let q1 = qr.q().columns(0, k0).clone_owned();
    let mut core = qr.r().rows(0, k0).clone_owned();
    qr.p().inv_permute_columns(&mut core);
    println!("cpqr cut err {:.3e}", (&q1 * &core - &c).norm());
    let svd = core.clone().try_svd_unordered(true, true, f64::EPSILON, 0).unwrap();
    let rec = svd.u.as_ref().unwrap() * DMatrix::from_diagonal(&svd.singular_values) * svd.v_t.as_ref().unwrap();
    println!("svd of core ({}x{}) recompose err {:.3e}", core.nrows(), core.ncols(), (rec - &core).norm());
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    println!("core sigmas tail: {:?}", &sv[sv.len().saturating_sub(4)..]);
}
