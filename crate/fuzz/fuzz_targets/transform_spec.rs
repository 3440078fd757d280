//! Registry lookups and the real-number syntax they accept.

#![no_main]

use covtool_core::zoo::{lookup, parse_real};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&dim, rest)) = data.split_first() else {
        return;
    };
    let Ok(spec) = std::str::from_utf8(rest) else {
        return;
    };
    let _ = parse_real(spec);
    let dim = (dim % 5 != 0).then_some((dim % 5) as usize);
    if let Ok(entry) = lookup(spec, dim) {
        let f = &entry.transform;
        let x = entry.default_domain.center();
        let mut out = vec![0.0; f.dim()];
        f.apply(&x, &mut out);
    }
});
