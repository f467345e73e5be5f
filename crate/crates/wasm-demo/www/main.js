import init, { lif_trace, fi_curve, raster } from "./pkg/spikesteer_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function axes(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#ddd";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
}

function report(el, err) {
  el.textContent = String(err);
  el.className = "error";
}

function drawTrace() {
  const cv = $("trace"), ctx = cv.getContext("2d");
  const current = num("tr-i");
  $("tr-i-val").textContent = current.toFixed(2);
  const dt = 0.05, duration = 200;
  let v;
  try {
    v = lif_trace(current, num("tr-th"), 10, 1, num("tr-ref"), dt, duration);
  } catch (e) {
    return report($("tr-msg"), e);
  }
  axes(ctx, cv.width, cv.height);
  const lo = -70, hi = 5;
  const y = (x) => cv.height - ((x - lo) / (hi - lo)) * cv.height;
  ctx.strokeStyle = "#1565c0";
  ctx.beginPath();
  v.forEach((x, k) => {
    const px = (k / v.length) * cv.width;
    k ? ctx.lineTo(px, y(x)) : ctx.moveTo(px, y(x));
  });
  ctx.stroke();
  const spikes = v.filter((x) => x === 0).length;
  $("tr-msg").className = "note";
  $("tr-msg").textContent = `${spikes} spikes in ${duration} ms`;
}

function drawCurve() {
  const cv = $("fi"), ctx = cv.getContext("2d");
  const data = fi_curve(num("fi-max"), num("fi-n"), -50, 10, 1, 2, num("fi-dt"));
  const pts = [];
  for (let k = 0; k < data.length; k += 3) pts.push(data.slice(k, k + 3));
  axes(ctx, cv.width, cv.height);
  const imax = pts[pts.length - 1][0];
  const rmax = Math.max(1, ...pts.map((p) => Math.max(p[1], p[2])));
  const x = (i) => (i / imax) * (cv.width - 20) + 10;
  const y = (r) => cv.height - 10 - (r / rmax) * (cv.height - 20);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  pts.forEach(([i, , a], k) => (k ? ctx.lineTo(x(i), y(a)) : ctx.moveTo(x(i), y(a))));
  ctx.stroke();
  ctx.fillStyle = "#c62828";
  for (const [i, s] of pts) {
    ctx.beginPath();
    ctx.arc(x(i), y(s), 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function drawRaster() {
  const cv = $("raster"), ctx = cv.getContext("2d");
  const ne = num("ra-e"), ni = num("ra-i"), ticks = 5000;
  let s;
  try {
    s = raster(ne, ni, num("ra-p"), num("ra-d"), num("ra-s"), ticks);
  } catch (e) {
    return report($("ra-msg"), e);
  }
  axes(ctx, cv.width, cv.height);
  const n = ne + ni;
  for (let k = 0; k < s.length; k += 2) {
    ctx.fillStyle = s[k + 1] < ne ? "#2e7d32" : "#6a1b9a";
    ctx.fillRect((s[k] / ticks) * cv.width, (s[k + 1] / n) * cv.height, 1, 1);
  }
  const count = s.length / 2;
  $("ra-msg").className = "note";
  $("ra-msg").textContent = `${count} spikes, mean rate ${(count / n / 0.5).toFixed(1)} Hz`;
}

await init();
for (const id of ["tr-i", "tr-th", "tr-ref"]) $(id).addEventListener("input", drawTrace);
$("fi-run").addEventListener("click", drawCurve);
$("ra-run").addEventListener("click", drawRaster);
drawTrace();
drawCurve();
drawRaster();
