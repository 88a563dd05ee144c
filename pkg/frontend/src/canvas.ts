/**
 * Query canvas state: nodes placed on screen with attribute selections,
 * drawn edges with relationship checkboxes, plus the eta slider and k
 * selector. Serializes to a valid engine query document.
 */
import {
  QueryDoc,
  canonicalizeQueryDoc,
  serializeQueryDoc,
  validateQueryDoc,
} from "./queryModel.js";

export interface CanvasNode {
  id: string;
  className: string;
  attributes: string[];
  x: number;
  y: number;
}

export interface CanvasEdge {
  a: string;
  b: string;
  relationships: string[];
}

export interface QueryCanvasState {
  nodes: CanvasNode[];
  edges: CanvasEdge[];
  eta: number;
  k: number;
}

export function emptyCanvas(): QueryCanvasState {
  return { nodes: [], edges: [], eta: 0.9, k: 20 };
}

export function canvasToDoc(canvas: QueryCanvasState): QueryDoc {
  return canonicalizeQueryDoc({
    nodes: canvas.nodes.map((n) => ({
      id: n.id,
      class: n.className,
      attributes: [...n.attributes],
    })),
    edges: canvas.edges.map((e) => ({ a: e.a, b: e.b, rel: [...e.relationships] })),
  });
}

export function canvasViolations(canvas: QueryCanvasState): string[] {
  return validateQueryDoc(canvasToDoc(canvas));
}

export function canExport(canvas: QueryCanvasState): boolean {
  return canvas.nodes.length >= 1 && canvasViolations(canvas).length === 0;
}

/** Canonical query document bytes; throws when the canvas is invalid. */
export function exportQuery(canvas: QueryCanvasState): string {
  const violations = canvasViolations(canvas);
  if (violations.length) {
    throw new Error("canvas is not exportable: " + violations.join("; "));
  }
  return serializeQueryDoc(canvasToDoc(canvas));
}

/** Rebuild an editable canvas from a query document (layout on a circle). */
export function canvasFromDoc(doc: QueryDoc, eta = 0.9, k = 20): QueryCanvasState {
  const canonical = canonicalizeQueryDoc(doc);
  const n = canonical.nodes.length;
  const nodes = canonical.nodes.map((node, i) => ({
    id: node.id,
    className: node.class,
    attributes: [...node.attributes],
    x: 300 + 180 * Math.cos((2 * Math.PI * i) / Math.max(n, 1)),
    y: 220 + 150 * Math.sin((2 * Math.PI * i) / Math.max(n, 1)),
  }));
  const edges = canonical.edges.map((e) => ({
    a: e.a,
    b: e.b,
    relationships: [...e.rel],
  }));
  return { nodes, edges, eta, k };
}

let counter = 0;

export function freshNodeId(canvas: QueryCanvasState, className: string): string {
  const prefix = className[0];
  counter = 0;
  let id = "";
  do {
    counter += 1;
    id = `${prefix}${counter}`;
  } while (canvas.nodes.some((n) => n.id === id));
  return id;
}
