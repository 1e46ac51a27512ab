// SPDX-License-Identifier: MIT OR Apache-2.0

mod support;

use support::micro_net::MicroNet;

#[test]
fn fifty_random_nets_match_central_differences() {
    let mut worst = (0.0, 0);
    for seed in 0..50 {
        let e = MicroNet::random(seed).max_rel_error(1e-4);
        if e > worst.0 {
            worst = (e, seed);
        }
    }
    println!("worst relative error {:.3e} (net {})", worst.0, worst.1);
    assert!(
        worst.0 < 1e-4,
        "net {} has relative error {:.3e}",
        worst.1,
        worst.0
    );
}

#[test]
fn nets_differ_across_seeds() {
    let a = MicroNet::random(1);
    let b = MicroNet::random(2);
    assert_ne!(a.params[0].data(), b.params[0].data());
}
