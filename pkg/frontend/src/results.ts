/**
 * Result browsing state: the ranked list as returned by the service, the
 * selected grounding, and the per-factor breakdown backing the detail
 * panel and the space-time plot.
 */

export interface VolumeDoc {
  x: number;
  y: number;
  w: number;
  h: number;
  t_start: number;
  t_end: number;
}

export interface RankedGrounding {
  rank: number;
  full_log_score: number;
  tree_log_score?: number;
  mapping: Record<string, number>;
  volume?: VolumeDoc;
}

export interface QueryResponse {
  result_id: string;
  eta: number;
  k: number;
  refinement_rounds: number;
  ranked: RankedGrounding[];
}

export interface ObservationDoc {
  box: number[];
  t: number;
  track_id: number;
}

export interface GroundingDetail {
  rank: number;
  full_log_score: number;
  mapping: Record<string, number>;
  node_factors: Record<string, Record<string, number>>;
  edge_factors: { a: string; b: string; factors: Record<string, number> }[];
  volume?: VolumeDoc;
  observations: Record<string, ObservationDoc>;
}

export interface ResultViewState {
  resultId: string;
  rows: RankedGrounding[];
  refinementRounds: number;
  notice: string | null;
  selectedRank: number | null;
  detail: GroundingDetail | null;
}

export function renderResults(response: QueryResponse): ResultViewState {
  let notice: string | null = null;
  if (!response.ranked.length) {
    notice =
      response.refinement_rounds > 0
        ? `no matches; thresholds relaxed ${response.refinement_rounds}×`
        : "no matches";
  }
  return {
    resultId: response.result_id,
    rows: [...response.ranked],
    refinementRounds: response.refinement_rounds,
    notice,
    selectedRank: null,
    detail: null,
  };
}

export function selectDetail(
  state: ResultViewState,
  rank: number,
  detail: GroundingDetail,
): ResultViewState {
  return { ...state, selectedRank: rank, detail };
}

/** Sum of every node and edge log factor; equals the row score. */
export function factorTotal(detail: GroundingDetail): number {
  let total = 0;
  for (const factors of Object.values(detail.node_factors)) {
    for (const value of Object.values(factors)) total += value;
  }
  for (const edge of detail.edge_factors) {
    for (const value of Object.values(edge.factors)) total += value;
  }
  return total;
}

export interface FactorRow {
  component: string;
  concept: string;
  logProb: number;
}

export function factorRows(detail: GroundingDetail): FactorRow[] {
  const rows: FactorRow[] = [];
  for (const [nodeId, factors] of Object.entries(detail.node_factors).sort()) {
    for (const [concept, value] of Object.entries(factors).sort()) {
      rows.push({ component: nodeId, concept, logProb: value });
    }
  }
  for (const edge of detail.edge_factors) {
    for (const [concept, value] of Object.entries(edge.factors).sort()) {
      rows.push({ component: `${edge.a}–${edge.b}`, concept, logProb: value });
    }
  }
  return rows;
}
