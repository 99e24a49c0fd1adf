//! Schematic 256x256 top-down raster of a cell.
//!
//! Row 0 carries a lossless binary strip of the world state (magic `AEV1`
//! followed by little-endian f64 fields packed into RGB bytes), so the
//! builtin servers can recover the exact state from an observation. The rest
//! of the image draws the scene as flat shapes.

use image::{Rgb, RgbImage};

use super::world::{CellWorldState, GripperPose, SceneGeometry};
use crate::gateway::IMAGE_SIDE;
use crate::model::{Container, Scene};

const MAGIC: &[u8; 4] = b"AEV1";
const FIELDS: usize = 22;
const STRIP_BYTES: usize = MAGIC.len() + FIELDS * 8;

const TABLE: Rgb<u8> = Rgb([200, 190, 170]);
const SINK: Rgb<u8> = Rgb([70, 110, 200]);
const BASKET: Rgb<u8> = Rgb([230, 200, 60]);
const EGGPLANT: Rgb<u8> = Rgb([110, 40, 120]);
const DRAWER: Rgb<u8> = Rgb([130, 90, 50]);
const HANDLE: Rgb<u8> = Rgb([40, 40, 40]);
const CLOTH: Rgb<u8> = Rgb([60, 90, 210]);
const CLOTH_FOLD: Rgb<u8> = Rgb([30, 50, 140]);
const GRIPPER_OPEN: Rgb<u8> = Rgb([40, 170, 60]);
const GRIPPER_CLOSED: Rgb<u8> = Rgb([200, 40, 40]);

fn scene_code(scene: Scene) -> f64 {
    match scene {
        Scene::Drawer => 0.0,
        Scene::Sink => 1.0,
        Scene::Cloth => 2.0,
    }
}

fn container_code(c: Container) -> f64 {
    match c {
        Container::None => 0.0,
        Container::Sink => 1.0,
        Container::Basket => 2.0,
    }
}

fn encode_fields(w: &CellWorldState) -> [f64; FIELDS] {
    let p = w.gripper_pose;
    let e = w.joint_efforts;
    [
        scene_code(w.scene),
        p.position[0],
        p.position[1],
        p.position[2],
        p.rotation[0],
        p.rotation[1],
        p.rotation[2],
        p.gripper,
        w.drawer_openness_m,
        w.object_xy_m[0],
        w.object_xy_m[1],
        container_code(w.container),
        w.fold_fraction,
        if w.motors_ok { 1.0 } else { 0.0 },
        w.elapsed_steps as f64,
        if w.object_escaped { 1.0 } else { 0.0 },
        e[0],
        e[1],
        e[2],
        e[3],
        e[4],
        e[5],
    ]
}

/// Recover the exact world state from a rendered frame.
pub fn decode_state(img: &RgbImage) -> Option<CellWorldState> {
    if img.width() * 3 < STRIP_BYTES as u32 {
        return None;
    }
    let bytes: Vec<u8> = (0..STRIP_BYTES.div_ceil(3) as u32).flat_map(|x| img.get_pixel(x, 0).0).collect();
    if &bytes[..4] != MAGIC {
        return None;
    }
    let mut f = [0.0; FIELDS];
    for (i, chunk) in bytes[4..STRIP_BYTES].chunks_exact(8).enumerate() {
        f[i] = f64::from_le_bytes(chunk.try_into().ok()?);
    }
    let scene = match f[0] as u8 {
        0 => Scene::Drawer,
        1 => Scene::Sink,
        2 => Scene::Cloth,
        _ => return None,
    };
    let container = match f[11] as u8 {
        0 => Container::None,
        1 => Container::Sink,
        2 => Container::Basket,
        _ => return None,
    };
    Some(CellWorldState {
        scene,
        gripper_pose: GripperPose { position: [f[1], f[2], f[3]], rotation: [f[4], f[5], f[6]], gripper: f[7] },
        drawer_openness_m: f[8],
        object_xy_m: [f[9], f[10]],
        container,
        fold_fraction: f[12],
        motors_ok: f[13] != 0.0,
        elapsed_steps: f[14] as u32,
        object_escaped: f[15] != 0.0,
        joint_efforts: [f[16], f[17], f[18], f[19], f[20], f[21]],
    })
}

/// World x (away from the robot) maps to rows, world y to columns.
fn to_pixel(x: f64, y: f64) -> (f64, f64) {
    let row = 8.0 + (x - 0.10) / 0.40 * 247.0;
    let col = (y + 0.25) / 0.50 * 255.0;
    (row, col)
}

fn fill_rect(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let (r0, c0) = to_pixel(x0.min(x1), y0.min(y1));
    let (r1, c1) = to_pixel(x0.max(x1), y0.max(y1));
    let rows = (r0.floor().max(1.0) as u32)..=(r1.ceil().min(255.0) as u32);
    for r in rows {
        for c in (c0.floor().max(0.0) as u32)..=(c1.ceil().min(255.0) as u32) {
            img.put_pixel(c, r, color);
        }
    }
}

fn fill_disc(img: &mut RgbImage, x: f64, y: f64, radius_px: f64, color: Rgb<u8>) {
    let (rc, cc) = to_pixel(x, y);
    let r0 = (rc - radius_px).floor().max(1.0) as i64;
    let r1 = (rc + radius_px).ceil().min(255.0) as i64;
    let c0 = (cc - radius_px).floor().max(0.0) as i64;
    let c1 = (cc + radius_px).ceil().min(255.0) as i64;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dr = r as f64 - rc;
            let dc = c as f64 - cc;
            if dr * dr + dc * dc <= radius_px * radius_px {
                img.put_pixel(c as u32, r as u32, color);
            }
        }
    }
}

pub fn render(world: &CellWorldState, geometry: &SceneGeometry) -> RgbImage {
    let mut img = RgbImage::from_pixel(IMAGE_SIDE, IMAGE_SIDE, TABLE);
    match world.scene {
        Scene::Drawer => {
            let h = geometry.drawer_handle(world.drawer_openness_m);
            fill_rect(&mut img, h[0], h[1] - 0.06, h[0] + 0.10, h[1] + 0.06, DRAWER);
            fill_rect(&mut img, h[0] - 0.006, h[1] - 0.02, h[0], h[1] + 0.02, HANDLE);
        }
        Scene::Sink => {
            let s = geometry.sink_region;
            let b = geometry.basket_region;
            fill_rect(&mut img, s.min[0], s.min[1], s.max[0], s.max[1], SINK);
            fill_rect(&mut img, b.min[0], b.min[1], b.max[0], b.max[1], BASKET);
            if !world.object_escaped {
                let r = geometry.object_radius / 0.40 * 247.0;
                fill_disc(&mut img, world.object_xy_m[0], world.object_xy_m[1], r.max(2.0), EGGPLANT);
            }
        }
        Scene::Cloth => {
            let c = geometry.cloth_corner;
            let d = geometry.cloth_diagonal;
            fill_rect(&mut img, c[0], c[1], c[0] + d[0], c[1] + d[1], CLOTH);
            let a = geometry.cloth_anchor(world.fold_fraction);
            fill_rect(&mut img, c[0], c[1], a[0], a[1], CLOTH_FOLD);
        }
    }
    let p = world.gripper_pose.position;
    let color = if world.gripper_pose.gripper < 0.5 { GRIPPER_CLOSED } else { GRIPPER_OPEN };
    fill_disc(&mut img, p[0], p[1], 3.0 + 20.0 * p[2], color);

    let fields = encode_fields(world);
    let mut bytes = Vec::with_capacity(STRIP_BYTES.div_ceil(3) * 3);
    bytes.extend_from_slice(MAGIC);
    for v in fields {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.resize(STRIP_BYTES.div_ceil(3) * 3, 0);
    for (x, px) in bytes.chunks_exact(3).enumerate() {
        img.put_pixel(x as u32, 0, Rgb([px[0], px[1], px[2]]));
    }
    img
}
