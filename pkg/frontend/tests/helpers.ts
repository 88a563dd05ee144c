import { CanvasEdge, CanvasNode, QueryCanvasState } from "../src/canvas.js";
import { ATTRIBUTE_CONCEPTS, CLASSES, RELATIONSHIPS, attributeBase } from "../src/queryModel.js";

/** Small deterministic PRNG for reproducible random canvases. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a += 0x6d2b79f5;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function pick<T>(rng: () => number, items: readonly T[]): T {
  return items[Math.floor(rng() * items.length)];
}

export function randomCanvas(seed: number): QueryCanvasState {
  const rng = mulberry32(seed);
  const n = 1 + Math.floor(rng() * 5);
  const nodes: CanvasNode[] = [];
  for (let i = 0; i < n; i++) {
    const attributes: string[] = [];
    const bases = new Set<string>();
    const nAttrs = Math.floor(rng() * 3);
    for (let j = 0; j < nAttrs; j++) {
      const concept = pick(rng, ATTRIBUTE_CONCEPTS);
      const base = attributeBase(concept);
      if (!bases.has(base)) {
        bases.add(base);
        attributes.push(concept);
      }
    }
    nodes.push({
      id: `n${i}`,
      className: pick(rng, CLASSES),
      attributes,
      x: rng() * 600,
      y: rng() * 400,
    });
  }
  const edges: CanvasEdge[] = [];
  for (let i = 1; i < n; i++) {
    const j = Math.floor(rng() * i);
    const count = 1 + Math.floor(rng() * 2);
    const rels = new Set<string>();
    for (let r = 0; r < count; r++) rels.add(pick(rng, RELATIONSHIPS));
    edges.push({ a: `n${j}`, b: `n${i}`, relationships: [...rels] });
  }
  for (let i = 0; i < n; i++) {
    for (let j = i + 1; j < n; j++) {
      const exists = edges.some(
        (e) => (e.a === `n${i}` && e.b === `n${j}`) || (e.a === `n${j}` && e.b === `n${i}`),
      );
      if (!exists && rng() < 0.3) {
        edges.push({ a: `n${i}`, b: `n${j}`, relationships: [pick(rng, RELATIONSHIPS)] });
      }
    }
  }
  return { nodes, edges, eta: 0.9, k: 20 };
}
