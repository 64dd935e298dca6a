//! Tiled, focus-prioritized upscaling for interactive zoom.
//!
//! An image is cut into 256x256 tiles. Each zoom request routes every tile
//! by zoom level, orders the tiles by distance to the gesture focus and
//! hands them to workers one at a time. Results are cached per image, tile,
//! zoom and strategy; model outputs at x4 are cached separately so a new
//! zoom level on the model path only repeats the resampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{resize_region, Interpolation, Shape, Tensor};
use crate::upscale::Upscaler;

pub const TILE_SIZE: usize = 256;
pub const MIN_ZOOM: f64 = 1.0;
pub const MAX_ZOOM: f64 = 5.0;
/// Factor the model path upscales by before resampling to the target zoom.
pub const MODEL_SCALE: usize = 4;

/// Clamps to `[1, 5]`; rejects non-finite values.
pub fn clamp_zoom(zoom: f64) -> Result<f64> {
    if !zoom.is_finite() {
        return Err(Error::invalid("zoom", format!("zoom must be finite, got {zoom}")));
    }
    Ok(zoom.clamp(MIN_ZOOM, MAX_ZOOM))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "target", rename_all = "snake_case")]
pub enum RouteStrategy {
    BilinearOnly,
    /// Model at x4, then bilinear down to the target zoom.
    ModelThenDownsample(f64),
    /// Model at x4, then bilinear up to the target zoom.
    ModelThenBilinear(f64),
}

impl RouteStrategy {
    pub fn uses_model(self) -> bool {
        !matches!(self, RouteStrategy::BilinearOnly)
    }
}

/// `zoom < 2` bilinear, `2 <= zoom <= 4` model then down, `zoom > 4` model
/// then up.
pub fn route(zoom: f64) -> RouteStrategy {
    if zoom < 2.0 {
        RouteStrategy::BilinearOnly
    } else if zoom <= 4.0 {
        RouteStrategy::ModelThenDownsample(zoom)
    } else {
        RouteStrategy::ModelThenBilinear(zoom)
    }
}

/// Which upscaler a tile request asks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Zoom-level routing through the model.
    Splitsr,
    Bilinear,
}

impl Method {
    pub fn strategy(self, zoom: f64) -> RouteStrategy {
        match self {
            Method::Splitsr => route(zoom),
            Method::Bilinear => RouteStrategy::BilinearOnly,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "splitsr" => Ok(Method::Splitsr),
            "bilinear" => Ok(Method::Bilinear),
            _ => Err(Error::UnknownName {
                kind: "method",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TileRect {
    /// Row-major position in the grid.
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// `[round(start * zoom), round(end * zoom))`.
fn scaled_span(start: usize, len: usize, zoom: f64) -> (usize, usize) {
    let a = (start as f64 * zoom).round() as usize;
    let b = ((start + len) as f64 * zoom).round() as usize;
    (a, b - a)
}

impl TileRect {
    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.width as f64 / 2.0, self.y as f64 + self.height as f64 / 2.0)
    }

    /// `(y, x, height, width)` of the tile in the image scaled by `zoom`.
    pub fn scaled(&self, zoom: f64) -> (usize, usize, usize, usize) {
        let (y, h) = scaled_span(self.y, self.height, zoom);
        let (x, w) = scaled_span(self.x, self.width, zoom);
        (y, x, h, w)
    }
}

/// Non-overlapping `tile x tile` grid in row-major order; the last row and
/// column hold the remainders.
pub fn tile_grid_with(width: usize, height: usize, tile: usize) -> Vec<TileRect> {
    let mut out = Vec::new();
    if tile == 0 {
        return out;
    }
    for (row, y) in (0..height).step_by(tile).enumerate() {
        for (col, x) in (0..width).step_by(tile).enumerate() {
            out.push(TileRect {
                index: out.len(),
                row,
                col,
                x,
                y,
                width: tile.min(width - x),
                height: tile.min(height - y),
            });
        }
    }
    out
}

pub fn tile_grid(width: usize, height: usize) -> Vec<TileRect> {
    tile_grid_with(width, height, TILE_SIZE)
}

/// Euclidean distance from each tile centre to `focus = (x, y)`.
pub fn priorities(tiles: &[TileRect], focus: (f64, f64)) -> Vec<f64> {
    tiles
        .iter()
        .map(|t| {
            let (cx, cy) = t.center();
            (cx - focus.0).hypot(cy - focus.1)
        })
        .collect()
}

/// Tile indices in execution order: nearest first, row-major among ties.
pub fn prioritize(tiles: &[TileRect], focus: (f64, f64)) -> Vec<usize> {
    let p = priorities(tiles, focus);
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(tiles[a].index.cmp(&tiles[b].index)));
    order.into_iter().map(|i| tiles[i].index).collect()
}

/// Output of one tile, and the x4 model output it was resampled from.
#[derive(Clone, Debug)]
pub struct TileOutput {
    pub pixels: Tensor<f32>,
    pub model_x4: Option<Tensor<f32>>,
}

/// Renders one tile of `image` at `zoom`.
///
/// Resampling is done in whole-image coordinates, so away from tile edges
/// the output equals resampling the whole image. `model_x4` short-cuts the
/// model on the model path.
pub fn render_tile(
    image: &Tensor<f32>,
    tile: &TileRect,
    zoom: f64,
    strategy: RouteStrategy,
    model: Option<&dyn Upscaler>,
    model_x4: Option<&Tensor<f32>>,
) -> Result<TileOutput> {
    let src = image.crop(tile.y, tile.x, tile.height, tile.width)?;
    let (oy, ox, oh, ow) = tile.scaled(zoom);
    if !strategy.uses_model() {
        let pixels = if zoom == 1.0 {
            src
        } else {
            resize_region(&src, Interpolation::Bilinear, zoom, (tile.y, tile.x), (oy, ox), (oh, ow))?
        };
        return Ok(TileOutput { pixels, model_x4: None });
    }
    let x4 = match model_x4 {
        Some(t) => t.clone(),
        None => model
            .ok_or_else(|| Error::invalid("render_tile", "the model path needs a model"))?
            .upscale(&src, MODEL_SCALE)?,
    };
    let m = MODEL_SCALE as f64;
    let pixels = if zoom == m {
        x4.clone()
    } else {
        resize_region(
            &x4,
            Interpolation::Bilinear,
            zoom / m,
            (tile.y * MODEL_SCALE, tile.x * MODEL_SCALE),
            (oy, ox),
            (oh, ow),
        )?
    };
    Ok(TileOutput { pixels, model_x4: Some(x4) })
}

/// An image assembled from tiles, with the indices of tiles that were not
/// available.
#[derive(Clone, Debug)]
pub struct Composed {
    pub image: Tensor<f32>,
    pub missing: Vec<usize>,
}

/// Places tiles at their scaled positions in a `round(H * zoom) x
/// round(W * zoom)` canvas. Tiles absent from `done` stay zero and are
/// reported.
pub fn compose(width: usize, height: usize, zoom: f64, tiles: &[TileRect], done: &HashMap<usize, Arc<Tensor<f32>>>) -> Result<Composed> {
    let (oh, ow) = (((height as f64) * zoom).round() as usize, ((width as f64) * zoom).round() as usize);
    let mut image = Tensor::zeros(Shape::new(1, 3, oh.max(1), ow.max(1)));
    let mut missing = Vec::new();
    for t in tiles {
        match done.get(&t.index) {
            Some(p) => {
                let (y, x, _, _) = t.scaled(zoom);
                image.paste(p, y, x)?;
            }
            None => missing.push(t.index),
        }
    }
    Ok(Composed { image, missing })
}

pub type RequestId = u64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZoomRequest {
    pub image: String,
    pub focus_x: f64,
    pub focus_y: f64,
    pub zoom: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Cancelled,
}

/// Cache identity of a tile result.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TileKey {
    pub image: String,
    pub tile: usize,
    zoom_bits: u64,
    pub model: bool,
}

impl TileKey {
    pub fn new(image: &str, tile: usize, zoom: f64, strategy: RouteStrategy) -> Self {
        TileKey {
            image: image.to_string(),
            tile,
            zoom_bits: zoom.to_bits(),
            model: strategy.uses_model(),
        }
    }

    pub fn zoom(&self) -> f64 {
        f64::from_bits(self.zoom_bits)
    }
}

#[derive(Clone, Debug)]
pub struct PatchJob {
    /// `None` for tiles fetched directly rather than through a request.
    pub request: Option<RequestId>,
    pub tile: TileRect,
    pub zoom: f64,
    pub strategy: RouteStrategy,
    /// Lower runs sooner.
    pub priority: f64,
    pub state: JobState,
    /// Position in the global completion sequence.
    pub finished: Option<u64>,
    pub latency: Option<Duration>,
    pub error: Option<String>,
    key: TileKey,
    created: Instant,
}

impl PatchJob {
    pub fn key(&self) -> &TileKey {
        &self.key
    }
}

struct RequestInfo {
    request: ZoomRequest,
    strategy: RouteStrategy,
    jobs: Vec<usize>,
}

/// A tile handed to a worker.
#[derive(Clone, Debug)]
pub struct WorkItem {
    pub key: TileKey,
    pub image: Arc<Tensor<f32>>,
    pub tile: TileRect,
    pub zoom: f64,
    pub strategy: RouteStrategy,
    pub model_x4: Option<Arc<Tensor<f32>>>,
}

impl WorkItem {
    pub fn run(&self, model: Option<&dyn Upscaler>) -> Result<TileOutput> {
        render_tile(&self.image, &self.tile, self.zoom, self.strategy, model, self.model_x4.as_deref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TileProgress {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub state: JobState,
    /// Completion position among all tiles the scheduler has finished.
    pub order: Option<u64>,
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Progress {
    pub request: RequestId,
    pub image: String,
    pub zoom: f64,
    pub strategy: RouteStrategy,
    pub done: usize,
    pub cancelled: usize,
    pub total: usize,
    pub tiles: Vec<TileProgress>,
}

impl Progress {
    pub fn finished(&self) -> bool {
        self.done + self.cancelled == self.total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

/// Job bookkeeping behind a serialized command interface. Tile work is
/// taken out with [`Scheduler::next_job`] and returned with
/// [`Scheduler::complete`]; nothing here computes pixels.
#[derive(Default)]
pub struct Scheduler {
    images: BTreeMap<String, Arc<Tensor<f32>>>,
    jobs: Vec<PatchJob>,
    requests: BTreeMap<RequestId, RequestInfo>,
    results: HashMap<TileKey, Arc<Tensor<f32>>>,
    model_tiles: HashMap<(String, usize), Arc<Tensor<f32>>>,
    in_flight: HashSet<TileKey>,
    computed: Vec<TileKey>,
    next_request: RequestId,
    finished: u64,
}

impl Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a `(1, 3, H, W)` image.
    pub fn add_image(&mut self, id: impl Into<String>, image: Tensor<f32>) -> Result<()> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::invalid("add_image", format!("expected one RGB image, got {s}")));
        }
        self.images.insert(id.into(), Arc::new(image));
        Ok(())
    }

    pub fn image(&self, id: &str) -> Result<Arc<Tensor<f32>>> {
        self.images.get(id).cloned().ok_or_else(|| Error::UnknownName {
            kind: "image",
            name: id.to_string(),
        })
    }

    pub fn images(&self) -> Vec<ImageInfo> {
        self.images
            .iter()
            .map(|(id, t)| ImageInfo {
                id: id.clone(),
                width: t.shape().w,
                height: t.shape().h,
            })
            .collect()
    }

    pub fn tiles(&self, image: &str) -> Result<Vec<TileRect>> {
        let s = self.image(image)?.shape();
        Ok(tile_grid(s.w, s.h))
    }

    pub fn jobs(&self) -> &[PatchJob] {
        &self.jobs
    }

    /// Keys of every tile actually computed, in completion order.
    pub fn computed(&self) -> &[TileKey] {
        &self.computed
    }

    fn new_job(&mut self, request: Option<RequestId>, tile: TileRect, zoom: f64, strategy: RouteStrategy, priority: f64, image: &str) -> usize {
        let key = TileKey::new(image, tile.index, zoom, strategy);
        let mut job = PatchJob {
            request,
            tile,
            zoom,
            strategy,
            priority,
            state: JobState::Pending,
            finished: None,
            latency: None,
            error: None,
            key,
            created: Instant::now(),
        };
        if self.results.contains_key(&job.key) {
            job.state = JobState::Done;
            job.finished = Some(self.finished);
            job.latency = Some(Duration::ZERO);
            self.finished += 1;
        } else if self.in_flight.contains(&job.key) {
            job.state = JobState::Running;
        }
        self.jobs.push(job);
        self.jobs.len() - 1
    }

    /// Starts a zoom request.
    ///
    /// Pending tiles of earlier requests on the same image are re-ordered
    /// by the new focus when they produce the same result the new request
    /// needs, and cancelled otherwise. Running tiles are left to finish and
    /// directly fetched tiles are not touched.
    pub fn submit(&mut self, request: ZoomRequest) -> Result<RequestId> {
        let image = self.image(&request.image)?;
        let zoom = clamp_zoom(request.zoom)?;
        if !(request.focus_x.is_finite() && request.focus_y.is_finite()) {
            return Err(Error::invalid("zoom", "focus must be finite"));
        }
        let request = ZoomRequest { zoom, ..request };
        let strategy = route(zoom);
        let s = image.shape();
        let tiles = tile_grid(s.w, s.h);
        let prio = priorities(&tiles, (request.focus_x, request.focus_y));
        let wanted: HashMap<TileKey, f64> = tiles
            .iter()
            .map(|t| (TileKey::new(&request.image, t.index, zoom, strategy), prio[t.index]))
            .collect();
        for job in &mut self.jobs {
            if job.key.image != request.image || job.state != JobState::Pending || job.request.is_none() {
                continue;
            }
            match wanted.get(&job.key) {
                Some(&p) => job.priority = p,
                None => job.state = JobState::Cancelled,
            }
        }
        self.next_request += 1;
        let id = self.next_request;
        let jobs = tiles
            .iter()
            .map(|&t| self.new_job(Some(id), t, zoom, strategy, prio[t.index], &request.image))
            .collect();
        self.requests.insert(id, RequestInfo { request, strategy, jobs });
        Ok(id)
    }

    fn request(&self, id: RequestId) -> Result<&RequestInfo> {
        self.requests.get(&id).ok_or_else(|| Error::UnknownName {
            kind: "request",
            name: id.to_string(),
        })
    }

    /// Re-orders the pending tiles of a request around a new focus.
    pub fn reprioritize(&mut self, id: RequestId, focus: (f64, f64)) -> Result<()> {
        let jobs = self.request(id)?.jobs.clone();
        for j in jobs {
            let job = &mut self.jobs[j];
            if job.state == JobState::Pending {
                let (cx, cy) = job.tile.center();
                job.priority = (cx - focus.0).hypot(cy - focus.1);
            }
        }
        Ok(())
    }

    /// Cancels the pending tiles of a request.
    pub fn cancel(&mut self, id: RequestId) -> Result<()> {
        let jobs = self.request(id)?.jobs.clone();
        for j in jobs {
            if self.jobs[j].state == JobState::Pending {
                self.jobs[j].state = JobState::Cancelled;
            }
        }
        Ok(())
    }

    pub fn poll(&self, id: RequestId) -> Result<Progress> {
        let info = self.request(id)?;
        let tiles: Vec<TileProgress> = info
            .jobs
            .iter()
            .map(|&j| {
                let job = &self.jobs[j];
                TileProgress {
                    index: job.tile.index,
                    row: job.tile.row,
                    col: job.tile.col,
                    state: job.state,
                    order: job.finished,
                    latency_ms: job.latency.map(|d| d.as_secs_f64() * 1000.0),
                }
            })
            .collect();
        let count = |s| tiles.iter().filter(|t| t.state == s).count();
        Ok(Progress {
            request: id,
            image: info.request.image.clone(),
            zoom: info.request.zoom,
            strategy: info.strategy,
            done: count(JobState::Done),
            cancelled: count(JobState::Cancelled),
            total: tiles.len(),
            tiles,
        })
    }

    pub fn has_pending(&self) -> bool {
        self.jobs
            .iter()
            .any(|j| j.state == JobState::Pending && !self.in_flight.contains(&j.key))
    }

    /// Takes the most urgent pending tile: lowest priority, then row-major
    /// tile index, then submission order. Every other pending job for the
    /// same result is marked running with it.
    pub fn next_job(&mut self) -> Option<WorkItem> {
        let pick = self
            .jobs
            .iter()
            .enumerate()
            .filter(|(_, j)| j.state == JobState::Pending && !self.in_flight.contains(&j.key))
            .min_by(|(a, ja), (b, jb)| {
                ja.priority
                    .total_cmp(&jb.priority)
                    .then(ja.tile.index.cmp(&jb.tile.index))
                    .then(a.cmp(b))
            })
            .map(|(i, _)| i)?;
        let key = self.jobs[pick].key.clone();
        for j in &mut self.jobs {
            if j.key == key && j.state == JobState::Pending {
                j.state = JobState::Running;
            }
        }
        self.in_flight.insert(key.clone());
        let job = &self.jobs[pick];
        Some(WorkItem {
            image: self.images[&key.image].clone(),
            model_x4: if job.strategy.uses_model() {
                self.model_tiles.get(&(key.image.clone(), key.tile)).cloned()
            } else {
                None
            },
            key,
            tile: job.tile,
            zoom: job.zoom,
            strategy: job.strategy,
        })
    }

    /// Records the outcome of a tile and finishes every job waiting on it.
    pub fn complete(&mut self, item: &WorkItem, outcome: Result<TileOutput>) {
        self.in_flight.remove(&item.key);
        let now = Instant::now();
        let error = match outcome {
            Ok(out) => {
                self.computed.push(item.key.clone());
                if let Some(x4) = out.model_x4 {
                    self.model_tiles
                        .entry((item.key.image.clone(), item.key.tile))
                        .or_insert_with(|| Arc::new(x4));
                }
                self.results.insert(item.key.clone(), Arc::new(out.pixels));
                None
            }
            Err(e) => Some(e.to_string()),
        };
        let seq = self.finished;
        self.finished += 1;
        for j in &mut self.jobs {
            if j.key == item.key && j.state == JobState::Running {
                j.state = if error.is_some() { JobState::Cancelled } else { JobState::Done };
                j.finished = Some(seq);
                j.latency = Some(now.duration_since(j.created));
                j.error = error.clone();
            }
        }
    }

    pub fn cached(&self, key: &TileKey) -> Option<Arc<Tensor<f32>>> {
        self.results.get(key).cloned()
    }

    /// Looks up one tile and, when it is not cached, makes sure a job for
    /// it runs before anything else.
    pub fn demand(&mut self, image: &str, tile: usize, zoom: f64, method: Method) -> Result<(TileKey, Option<Arc<Tensor<f32>>>)> {
        let tiles = self.tiles(image)?;
        let rect = *tiles.get(tile).ok_or_else(|| Error::invalid("demand", format!("tile {tile} outside the grid")))?;
        let zoom = clamp_zoom(zoom)?;
        let strategy = method.strategy(zoom);
        let key = TileKey::new(image, tile, zoom, strategy);
        if let Some(t) = self.results.get(&key) {
            return Ok((key, Some(t.clone())));
        }
        let mut queued = false;
        for j in &mut self.jobs {
            if j.key == key && matches!(j.state, JobState::Pending | JobState::Running) {
                if j.state == JobState::Pending {
                    j.priority = -1.0;
                }
                queued = true;
            }
        }
        if !queued {
            self.new_job(None, rect, zoom, strategy, -1.0, image);
        }
        Ok((key, None))
    }

    /// Assembles whatever tiles of a request are done.
    pub fn compose(&self, id: RequestId) -> Result<Composed> {
        let info = self.request(id)?;
        let image = self.image(&info.request.image)?;
        let s = image.shape();
        let tiles = tile_grid(s.w, s.h);
        let done: HashMap<usize, Arc<Tensor<f32>>> = tiles
            .iter()
            .filter_map(|t| {
                let key = TileKey::new(&info.request.image, t.index, info.request.zoom, info.strategy);
                self.results.get(&key).map(|r| (t.index, r.clone()))
            })
            .collect();
        compose(s.w, s.h, info.request.zoom, &tiles, &done)
    }
}

/// Runs every pending job on the calling thread, in scheduler order.
pub fn drain(scheduler: &mut Scheduler, model: Option<&dyn Upscaler>) {
    while let Some(item) = scheduler.next_job() {
        let out = item.run(model);
        scheduler.complete(&item, out);
    }
}

struct Shared {
    scheduler: Mutex<Scheduler>,
    changed: Condvar,
    shutdown: Mutex<bool>,
}

/// A [`Scheduler`] served by a pool of worker threads.
pub struct ZoomEngine {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl ZoomEngine {
    /// Starts `workers` threads (at least one). `model` upscales by 4.
    pub fn start(scheduler: Scheduler, model: Option<Arc<dyn Upscaler>>, workers: usize) -> Self {
        let shared = Arc::new(Shared {
            scheduler: Mutex::new(scheduler),
            changed: Condvar::new(),
            shutdown: Mutex::new(false),
        });
        let workers = (0..workers.max(1))
            .map(|_| {
                let shared = shared.clone();
                let model = model.clone();
                std::thread::spawn(move || worker(&shared, model.as_deref()))
            })
            .collect();
        ZoomEngine { shared, workers }
    }

    /// Serialized access to the scheduler. Workers are woken when the
    /// guard is released through [`ZoomEngine::with`].
    fn lock(&self) -> MutexGuard<'_, Scheduler> {
        self.shared.scheduler.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut Scheduler) -> R) -> R {
        let r = f(&mut self.lock());
        self.shared.changed.notify_all();
        r
    }

    pub fn submit(&self, request: ZoomRequest) -> Result<RequestId> {
        self.with(|s| s.submit(request))
    }

    pub fn poll(&self, id: RequestId) -> Result<Progress> {
        self.lock().poll(id)
    }

    /// Blocks until one tile is available.
    pub fn tile(&self, image: &str, tile: usize, zoom: f64, method: Method, timeout: Duration) -> Result<Arc<Tensor<f32>>> {
        let deadline = Instant::now() + timeout;
        let (key, ready) = self.with(|s| s.demand(image, tile, zoom, method))?;
        if let Some(t) = ready {
            return Ok(t);
        }
        let mut guard = self.lock();
        loop {
            if let Some(t) = guard.cached(&key) {
                return Ok(t);
            }
            let jobs = guard.jobs().iter().filter(|j| *j.key() == key);
            if !jobs.clone().any(|j| matches!(j.state, JobState::Pending | JobState::Running)) {
                let reason = jobs.filter_map(|j| j.error.clone()).last();
                return Err(Error::invalid("tile", reason.unwrap_or_else(|| "cancelled".into())));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::invalid("tile", "timed out"));
            }
            guard = self
                .shared
                .changed
                .wait_timeout(guard, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Blocks until every tile of a request is done or cancelled.
    pub fn wait(&self, id: RequestId, timeout: Duration) -> Result<Progress> {
        let deadline = Instant::now() + timeout;
        let mut guard = self.lock();
        loop {
            let p = guard.poll(id)?;
            let now = Instant::now();
            if p.finished() || now >= deadline {
                return Ok(p);
            }
            guard = self
                .shared
                .changed
                .wait_timeout(guard, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

fn worker(shared: &Shared, model: Option<&dyn Upscaler>) {
    loop {
        let item = {
            let mut guard = shared.scheduler.lock().unwrap_or_else(|e| e.into_inner());
            loop {
                if *shared.shutdown.lock().unwrap_or_else(|e| e.into_inner()) {
                    return;
                }
                if let Some(item) = guard.next_job() {
                    break item;
                }
                guard = shared.changed.wait(guard).unwrap_or_else(|e| e.into_inner());
            }
        };
        let out = item.run(model);
        shared
            .scheduler
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .complete(&item, out);
        shared.changed.notify_all();
    }
}

impl Drop for ZoomEngine {
    fn drop(&mut self) {
        *self.shared.shutdown.lock().unwrap_or_else(|e| e.into_inner()) = true;
        {
            let _guard = self.shared.scheduler.lock().unwrap_or_else(|e| e.into_inner());
            self.shared.changed.notify_all();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
