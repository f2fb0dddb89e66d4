import init, { alignDiaphragm, labelMatrices, decoderAttention } from "./pkg/asg_wasm.js";

const $ = (id) => document.getElementById(id);

function call(fn, target) {
  try {
    target.classList.remove("err");
    return JSON.parse(fn());
  } catch (e) {
    target.classList.add("err");
    target.textContent = String(e.message ?? e);
    return null;
  }
}

const corners = (b) => [b.x1, b.y1, b.x2, b.y2];

function parseBox(text) {
  return Float64Array.from(text.split(",").map(Number));
}

function drawBoxes(ctx, left, right, merged) {
  const s = 1.0;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  const rect = (b, color, dash) => {
    ctx.setLineDash(dash);
    ctx.strokeStyle = color;
    ctx.lineWidth = 2;
    ctx.strokeRect(b[0] * s, b[1] * s, (b[2] - b[0]) * s, (b[3] - b[1]) * s);
  };
  rect(left, "#4af", []);
  rect(right, "#fa4", []);
  if (merged) rect(merged, "#f44", [6, 4]);
}

function renderAlign() {
  const left = parseBox($("left").value);
  const right = parseBox($("right").value);
  const out = call(() => alignDiaphragm($("sentence").value, left, right), $("pairs"));
  const ctx = $("boxes").getContext("2d");
  if (!out) {
    ctx.clearRect(0, 0, 420, 300);
    return;
  }
  const merged = out.merge.find((p) => p.strategy === "merged_boxes");
  drawBoxes(ctx, left, right, merged && corners(merged.crop));
  const show = (p) => `${p.strategy.padEnd(14)} [${corners(p.crop).map((v) => v.toFixed(0)).join(", ")}]  ${p.sentence_text}`;
  $("pairs").textContent = [
    "triplets:",
    ...out.triplets.map((t) => `  <${t.region}, ${t.finding}, ${t.existence}>`),
    "merge:",
    ...out.merge.map((p) => "  " + show(p)),
    "split:",
    ...out.split.map((p) => "  " + show(p)),
    ...(out.diagnostics.length ? ["diagnostics:", ...out.diagnostics.map((d) => "  " + d)] : []),
  ].join("\n");
}

function heatmap(matrix, caption, cell = 22) {
  const fig = document.createElement("figure");
  const c = document.createElement("canvas");
  const rows = matrix.length;
  const cols = rows ? matrix[0].length : 0;
  c.width = cols * cell;
  c.height = rows * cell;
  const ctx = c.getContext("2d");
  matrix.forEach((row, i) =>
    row.forEach((v, j) => {
      const g = Math.round(255 * Math.min(1, Math.max(0, v)));
      ctx.fillStyle = `rgb(${g}, ${Math.round(g * 0.8)}, ${255 - g})`;
      ctx.fillRect(j * cell, i * cell, cell - 1, cell - 1);
    }),
  );
  const cap = document.createElement("figcaption");
  cap.textContent = caption;
  fig.append(c, cap);
  return fig;
}

function renderLabels() {
  const tau = Math.exp(Number($("tau").value));
  const alpha = Number($("alpha").value);
  $("tauv").textContent = tau.toFixed(3);
  $("alphav").textContent = alpha.toFixed(2);
  const v = call(() => labelMatrices(Number($("lseed").value), Number($("n").value), tau, alpha), $("lstats"));
  if (!v) return;
  $("lgrids").replaceChildren(
    heatmap(v.similarity, "similarity (image to text)"),
    heatmap(v.soft, "soft targets"),
    heatmap(v.mixed, "mixed targets"),
  );
  $("lstats").textContent = `InfoNCE ${v.infonce.toFixed(4)}   KL to mixed targets ${v.kl.toFixed(4)}`;
}

function renderAttention() {
  const v = call(
    () => decoderAttention(Number($("aseed").value), Number($("tokens").value), Number($("classes").value), Number($("sharp").value)),
    $("astats"),
  );
  if (!v) return;
  $("agrids").replaceChildren(heatmap(v.attention, "class queries (rows) over visual tokens (columns)"));
  const probs = v.probs.map((p, j) => `${j}: ${p.toFixed(3)} (label ${v.labels[j]})`).join("   ");
  $("astats").textContent = `${probs}   BCE ${v.bce.toFixed(4)}`;
}

await init();
for (const id of ["sentence", "left", "right"]) $(id).addEventListener("input", renderAlign);
for (const id of ["lseed", "n", "tau", "alpha"]) $(id).addEventListener("input", renderLabels);
for (const id of ["aseed", "tokens", "classes", "sharp"]) $(id).addEventListener("input", renderAttention);
renderAlign();
renderLabels();
renderAttention();
