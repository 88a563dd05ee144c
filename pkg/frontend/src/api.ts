/** Service client: four endpoints, one in-flight query at a time. */
import { QueryDoc } from "./queryModel.js";
import { GroundingDetail, QueryResponse } from "./results.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: unknown,
  ) {
    super(`service error ${status}`);
  }
}

async function parseOrThrow(resp: Response) {
  const body = await resp.json();
  if (!resp.ok) {
    throw new ApiError(resp.status, body.detail ?? body);
  }
  return body;
}

let inflight: AbortController | null = null;

export async function postQuery(
  graph: QueryDoc,
  eta: number,
  k: number,
  base = "",
): Promise<QueryResponse> {
  if (inflight) {
    inflight.abort();
  }
  inflight = new AbortController();
  const resp = await fetch(`${base}/api/query`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ graph, eta, k }),
    signal: inflight.signal,
  });
  inflight = null;
  return parseOrThrow(resp);
}

export async function getDetail(
  resultId: string,
  rank: number,
  base = "",
): Promise<GroundingDetail> {
  const resp = await fetch(`${base}/api/result/${resultId}/grounding/${rank}`);
  return parseOrThrow(resp);
}

export async function getArchiveSummary(base = "") {
  const resp = await fetch(`${base}/api/archive/summary`);
  return parseOrThrow(resp);
}

export async function getHealth(base = "") {
  const resp = await fetch(`${base}/api/health`);
  return parseOrThrow(resp);
}
