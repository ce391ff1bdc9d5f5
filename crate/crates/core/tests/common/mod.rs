//! Independent oracles for the acceptance suite: central finite differences
//! for gradients, breadth-first flood fill for connected components, and
//! brute-force voxel enumeration for metrics and sphere rasterization.

use rand::Rng;
use voxseg::tensor::Tensor;
use voxseg::volume::LabelVolume;

/// Prints the per-criterion verdict line and propagates the failure.
pub fn criterion(name: &str, result: Result<(), String>) {
    match result {
        Ok(()) => println!("[PASS] {name}"),
        Err(e) => {
            println!("[FAIL] {name}: {e}");
            panic!("criterion failed: {name}: {e}");
        }
    }
}

/// Central finite-difference check of `d loss / d params` against the
/// reverse-mode gradients, at `coords` random coordinates spread over the
/// parameter tensors.
///
/// `f` must rebuild the graph from the parameters' current values and return
/// the scalar loss tensor.
pub fn finite_diff_check<R: Rng>(
    op_name: &str,
    params: &[&Tensor],
    f: &dyn Fn() -> Tensor,
    coords: usize,
    rng: &mut R,
) -> Result<(), String> {
    const H: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;
    const ABS_FLOOR: f64 = 1e-6;

    for p in params {
        p.zero_grad();
    }
    let loss = f();
    loss.backward()
        .map_err(|e| format!("{op_name}: backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .ok_or_else(|| format!("{op_name}: parameter has no gradient"))
        })
        .collect::<Result<_, _>>()?;

    for _ in 0..coords {
        let pi = rng.gen_range(0..params.len());
        let ci = rng.gen_range(0..params[pi].len());
        let original = params[pi].to_vec();

        let mut bumped = original.clone();
        bumped[ci] = original[ci] + H;
        params[pi].set_values(bumped);
        let plus = f().item();

        let mut bumped = original.clone();
        bumped[ci] = original[ci] - H;
        params[pi].set_values(bumped);
        let minus = f().item();

        params[pi].set_values(original);

        let numeric = (plus - minus) / (2.0 * H);
        let a = analytic[pi][ci];
        let denom = a.abs().max(numeric.abs());
        let ok = if denom < ABS_FLOOR {
            (a - numeric).abs() < ABS_FLOOR
        } else {
            (a - numeric).abs() / denom < REL_TOL
        };
        if !ok {
            return Err(format!(
                "{op_name}: param {pi} coord {ci}: analytic {a} vs numeric {numeric}"
            ));
        }
    }
    Ok(())
}

/// Breadth-first flood-fill connected components; labels are assigned in
/// z-major first-encounter order starting at 1. `offsets` lists the
/// neighborhood.
pub fn flood_fill_components(v: &LabelVolume, offsets: &[(i64, i64, i64)]) -> LabelVolume {
    let (x, y, z) = v.dims;
    let (xi, yi, zi) = (x as i64, y as i64, z as i64);
    let mut labels = vec![0u32; v.labels.len()];
    let mut next = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for zz in 0..z {
        for yy in 0..y {
            for xx in 0..x {
                let idx = (zz * y + yy) * x + xx;
                if v.labels[idx] == 0 || labels[idx] != 0 {
                    continue;
                }
                next += 1;
                labels[idx] = next;
                queue.push_back((xx as i64, yy as i64, zz as i64));
                while let Some((cx, cy, cz)) = queue.pop_front() {
                    for &(dx, dy, dz) in offsets {
                        let (nx, ny, nz) = (cx + dx, cy + dy, cz + dz);
                        if nx < 0 || ny < 0 || nz < 0 || nx >= xi || ny >= yi || nz >= zi {
                            continue;
                        }
                        let nidx = ((nz * yi + ny) * xi + nx) as usize;
                        if v.labels[nidx] != 0 && labels[nidx] == 0 {
                            labels[nidx] = next;
                            queue.push_back((nx, ny, nz));
                        }
                    }
                }
            }
        }
    }
    LabelVolume::new(v.dims, labels).expect("oracle labeling is well-formed")
}

/// Checks that two labelings describe the same partition of the foreground,
/// up to a bijective relabeling.
pub fn same_partition(a: &LabelVolume, b: &LabelVolume) -> Result<(), String> {
    if a.dims != b.dims {
        return Err("dims differ".into());
    }
    let mut fwd = std::collections::HashMap::new();
    let mut bwd = std::collections::HashMap::new();
    for (i, (&la, &lb)) in a.labels.iter().zip(b.labels.iter()).enumerate() {
        if (la == 0) != (lb == 0) {
            return Err(format!("foreground mask differs at linear index {i}"));
        }
        if la == 0 {
            continue;
        }
        if *fwd.entry(la).or_insert(lb) != lb || *bwd.entry(lb).or_insert(la) != la {
            return Err(format!("label correspondence broken at linear index {i}"));
        }
    }
    Ok(())
}

/// Brute-force voxel confusion counts.
pub fn brute_force_confusion(seg: &LabelVolume, truth: &LabelVolume) -> (u64, u64, u64, u64) {
    let (x, y, z) = seg.dims;
    let (mut tp, mut tn, mut fp, mut fne) = (0u64, 0u64, 0u64, 0u64);
    for zz in 0..z {
        for yy in 0..y {
            for xx in 0..x {
                match (seg.get(xx, yy, zz) > 0, truth.get(xx, yy, zz) > 0) {
                    (true, true) => tp += 1,
                    (false, false) => tn += 1,
                    (true, false) => fp += 1,
                    (false, true) => fne += 1,
                }
            }
        }
    }
    (tp, tn, fp, fne)
}

/// Brute-force count of voxel centers within `radius` of `center` in a grid
/// of the given dims.
pub fn brute_force_sphere_count(dims: (usize, usize, usize), center: [f64; 3], radius: f64) -> usize {
    let mut count = 0;
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let d = [
                    x as f64 - center[0],
                    y as f64 - center[1],
                    z as f64 - center[2],
                ];
                if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius {
                    count += 1;
                }
            }
        }
    }
    count
}
