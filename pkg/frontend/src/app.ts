/** Analyst console: build a query graph, run it, browse ranked returns. */
import { getDetail, postQuery, getArchiveSummary, ApiError } from "./api.js";
import {
  CanvasEdge,
  QueryCanvasState,
  canExport,
  canvasFromDoc,
  canvasToDoc,
  canvasViolations,
  emptyCanvas,
  freshNodeId,
} from "./canvas.js";
import { ATTRIBUTE_CONCEPTS, CLASSES, RELATIONSHIPS, QueryDoc } from "./queryModel.js";
import { layoutSpaceTime } from "./plot.js";
import {
  GroundingDetail,
  ResultViewState,
  factorRows,
  factorTotal,
  renderResults,
  selectDetail,
} from "./results.js";

let canvas: QueryCanvasState = emptyCanvas();
let view: ResultViewState | null = null;

const $ = (id: string) => document.getElementById(id)!;

function el(tag: string, cls?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

// --- query builder -----------------------------------------------------------

function renderBuilder() {
  const list = $("node-list");
  list.textContent = "";
  for (const node of canvas.nodes) {
    const card = el("div", "node-card");
    const head = el("div", "node-head", `${node.id} · ${node.className}`);
    const remove = el("button", "small", "remove");
    remove.onclick = () => {
      canvas.nodes = canvas.nodes.filter((n) => n.id !== node.id);
      canvas.edges = canvas.edges.filter((e) => e.a !== node.id && e.b !== node.id);
      renderBuilder();
    };
    head.appendChild(remove);
    card.appendChild(head);
    const attrs = el("div", "attrs");
    for (const concept of ATTRIBUTE_CONCEPTS) {
      const label = el("label");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.checked = node.attributes.includes(concept);
      box.onchange = () => {
        node.attributes = box.checked
          ? [...node.attributes, concept]
          : node.attributes.filter((a) => a !== concept);
        renderBuilder();
      };
      label.appendChild(box);
      label.appendChild(document.createTextNode(concept));
      attrs.appendChild(label);
    }
    card.appendChild(attrs);
    list.appendChild(card);
  }
  const selA = $("edge-a") as HTMLSelectElement;
  const selB = $("edge-b") as HTMLSelectElement;
  for (const sel of [selA, selB]) {
    const prev = sel.value;
    sel.textContent = "";
    for (const node of canvas.nodes) {
      const opt = document.createElement("option");
      opt.value = node.id;
      opt.textContent = node.id;
      sel.appendChild(opt);
    }
    if ([...sel.options].some((o) => o.value === prev)) sel.value = prev;
  }
  const edges = $("edge-list");
  edges.textContent = "";
  for (const edge of canvas.edges) {
    const row = el("div", "edge-row", `${edge.a} — ${edge.b}: ${edge.relationships.join(", ")}`);
    const remove = el("button", "small", "remove");
    remove.onclick = () => {
      canvas.edges = canvas.edges.filter((e) => e !== edge);
      renderBuilder();
    };
    row.appendChild(remove);
    edges.appendChild(row);
  }
  const violations = canvas.nodes.length ? canvasViolations(canvas) : ["graph has no nodes"];
  const badge = $("validation");
  badge.textContent = violations.length ? violations.join("; ") : "valid query";
  badge.className = violations.length ? "badge bad" : "badge ok";
  ($("run") as HTMLButtonElement).disabled = !canExport(canvas);
}

function wireBuilder() {
  for (const cls of CLASSES) {
    ($(`add-${cls}`) as HTMLButtonElement).onclick = () => {
      canvas.nodes.push({
        id: freshNodeId(canvas, cls),
        className: cls,
        attributes: [],
        x: 0,
        y: 0,
      });
      renderBuilder();
    };
  }
  const relBoxes = $("edge-rels");
  for (const rel of RELATIONSHIPS) {
    const label = el("label");
    const box = document.createElement("input");
    box.type = "checkbox";
    box.dataset.rel = rel;
    label.appendChild(box);
    label.appendChild(document.createTextNode(rel));
    relBoxes.appendChild(label);
  }
  ($("add-edge") as HTMLButtonElement).onclick = () => {
    const a = ($("edge-a") as HTMLSelectElement).value;
    const b = ($("edge-b") as HTMLSelectElement).value;
    const rels = [...relBoxes.querySelectorAll("input")].filter((x) => x.checked)
      .map((x) => x.dataset.rel!);
    if (!a || !b) return;
    const edge: CanvasEdge = { a, b, relationships: rels };
    canvas.edges.push(edge);
    renderBuilder();
  };
  const eta = $("eta") as HTMLInputElement;
  eta.onchange = () => {
    canvas.eta = parseFloat(eta.value);
    $("eta-value").textContent = eta.value;
    if (view) void runQuery();
  };
  eta.oninput = () => {
    $("eta-value").textContent = eta.value;
  };
  const k = $("k") as HTMLSelectElement;
  k.onchange = () => {
    canvas.k = parseInt(k.value, 10);
    if (view) void runQuery();
  };
  ($("run") as HTMLButtonElement).onclick = () => void runQuery();
}

// --- results -----------------------------------------------------------------

async function runQuery() {
  const doc = canvasToDoc(canvas);
  const status = $("status");
  status.textContent = "running…";
  try {
    const response = await postQuery(doc, canvas.eta, canvas.k);
    view = renderResults(response);
    location.hash = encodeURIComponent(
      JSON.stringify({ graph: doc, eta: canvas.eta, k: canvas.k }),
    );
    status.textContent = "";
    renderResultList();
  } catch (err) {
    if (err instanceof DOMException && err.name === "AbortError") return;
    status.textContent =
      err instanceof ApiError ? `error: ${JSON.stringify(err.detail)}` : String(err);
  }
}

function renderResultList() {
  const list = $("result-list");
  list.textContent = "";
  if (!view) return;
  if (view.notice) {
    list.appendChild(el("div", "notice", view.notice));
  } else if (view.refinementRounds > 0) {
    list.appendChild(
      el("div", "notice", `thresholds relaxed ${view.refinementRounds}× to find matches`),
    );
  }
  for (const row of view.rows) {
    const item = el("div", "result-row");
    if (view.selectedRank === row.rank) item.classList.add("selected");
    item.appendChild(el("span", "rank", `#${row.rank}`));
    item.appendChild(el("span", "score", row.full_log_score.toFixed(4)));
    item.appendChild(
      el("span", "mapping", Object.entries(row.mapping).map(([q, o]) => `${q}→${o}`).join("  ")),
    );
    item.onclick = () => void showDetail(row.rank);
    list.appendChild(item);
  }
}

async function showDetail(rank: number) {
  if (!view) return;
  const detail = await getDetail(view.resultId, rank);
  view = selectDetail(view, rank, detail);
  renderResultList();
  renderDetail(detail);
}

function renderDetail(detail: GroundingDetail) {
  const panel = $("detail");
  panel.textContent = "";
  panel.appendChild(
    el("h3", undefined, `rank ${detail.rank} · log-score ${detail.full_log_score.toFixed(4)}`),
  );
  const table = el("table", "factors");
  const head = el("tr");
  for (const title of ["component", "concept", "log p"]) head.appendChild(el("th", undefined, title));
  table.appendChild(head);
  for (const row of factorRows(detail)) {
    const tr = el("tr");
    tr.appendChild(el("td", undefined, row.component));
    tr.appendChild(el("td", undefined, row.concept));
    tr.appendChild(el("td", "num", row.logProb.toFixed(4)));
    table.appendChild(tr);
  }
  const totalRow = el("tr", "total");
  totalRow.appendChild(el("td", undefined, "total"));
  totalRow.appendChild(el("td"));
  totalRow.appendChild(el("td", "num", factorTotal(detail).toFixed(4)));
  table.appendChild(totalRow);
  panel.appendChild(table);
  drawPlot(detail);
}

function drawPlot(detail: GroundingDetail) {
  const plot = layoutSpaceTime(detail);
  const surface = $("plot") as HTMLCanvasElement;
  surface.width = plot.width;
  surface.height = plot.height;
  const ctx = surface.getContext("2d")!;
  ctx.clearRect(0, 0, plot.width, plot.height);
  ctx.font = "11px sans-serif";
  for (const rect of plot.rects) {
    ctx.strokeStyle = "#3a6ea5";
    ctx.strokeRect(rect.x, rect.y, rect.w, rect.h);
    ctx.fillStyle = "#3a6ea5";
    ctx.fillText(`${rect.label}@${rect.t}`, rect.x, rect.y - 3);
  }
  const axisY = plot.height - 20;
  ctx.strokeStyle = "#888";
  ctx.beginPath();
  ctx.moveTo(20, axisY);
  ctx.lineTo(plot.width - 20, axisY);
  ctx.stroke();
  ctx.fillStyle = "#444";
  for (const tick of plot.timeTicks) {
    ctx.beginPath();
    ctx.moveTo(tick.x, axisY - 4);
    ctx.lineTo(tick.x, axisY + 4);
    ctx.stroke();
    ctx.fillText(`${tick.label} t=${tick.t}`, tick.x - 12, axisY + 16);
  }
}

// --- boot ----------------------------------------------------------------------

function restoreFromHash(): boolean {
  if (!location.hash.length) return false;
  try {
    const state = JSON.parse(decodeURIComponent(location.hash.slice(1))) as {
      graph: QueryDoc;
      eta: number;
      k: number;
    };
    canvas = canvasFromDoc(state.graph, state.eta, state.k);
    ($("eta") as HTMLInputElement).value = String(state.eta);
    $("eta-value").textContent = String(state.eta);
    ($("k") as HTMLSelectElement).value = String(state.k);
    return true;
  } catch {
    return false;
  }
}

async function boot() {
  wireBuilder();
  try {
    const summary = await getArchiveSummary();
    $("archive-info").textContent =
      `${summary.n_observations} observations / ${summary.n_tracklets} tracklets, ` +
      `t ∈ [${summary.time_span[0]}, ${summary.time_span[1]}]`;
  } catch {
    $("archive-info").textContent = "no archive loaded";
  }
  const restored = restoreFromHash();
  renderBuilder();
  if (restored && canExport(canvas)) {
    await runQuery();
  }
}

if (typeof document !== "undefined") {
  void boot();
}
