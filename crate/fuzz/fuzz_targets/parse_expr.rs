#![no_main]

use avcat::expr::{parse_expr, Env, Scope};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&dims, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let scope = Scope { n: 1 + (dims & 3) as usize, k: (dims >> 2 & 3) as usize };
    if let Ok(e) = parse_expr(text, scope) {
        let (x, mu) = (vec![0.5; scope.n], vec![-0.25; scope.k]);
        let _ = e.eval(&Env { t: &1.0, x: &x, mu: &mu });
    }
});
