/**
 * Console state: coins grouped by the session's role, live timelines, and
 * the offline banner. Everything here derives from node responses and the
 * event stream; the console holds no authoritative state of its own.
 */

import { CommitEvent } from "./api.js";

export interface CoinView {
  cid: string;
  owner: string;
  holder: string;
  status: string; // valid | in_redemption | spent | unknown
  policy: any;
}

export interface ConsoleState {
  me: string; // session pk hex
  coins: Map<string, CoinView>;
  witnesses: Set<string>; // cids this session holds witnesses for
  timelines: Map<string, CommitEvent[]>;
  offline: boolean;
  lastHeight: number;
}

export function newState(me: string): ConsoleState {
  return {
    me,
    coins: new Map(),
    witnesses: new Set(),
    timelines: new Map(),
    offline: false,
    lastHeight: -1,
  };
}

export function noteTokoin(state: ConsoleState, cid: string, doc: any): void {
  if (!doc || doc.status === "unknown") return;
  const t = doc.tokoin;
  state.coins.set(cid, {
    cid,
    owner: t.owner,
    holder: t.holder,
    status: doc.status,
    policy: t.policy,
  });
}

export function applyEvent(state: ConsoleState, event: CommitEvent): void {
  state.lastHeight = Math.max(state.lastHeight, event.height);
  if (event.op === "register") return;
  const timeline = state.timelines.get(event.cid) ?? [];
  if (!timeline.some((e) => e.tx_hash === event.tx_hash)) {
    timeline.push(event);
    timeline.sort((a, b) => a.height - b.height || a.tx_index - b.tx_index);
    state.timelines.set(event.cid, timeline);
  }
  const tokoin = event.tx?.tokoin;
  if (tokoin) {
    const spent =
      event.op === "revoke" ||
      (event.op === "redeem_finalize" && tokoin.is_valid === false);
    state.coins.set(event.cid, {
      cid: event.cid,
      owner: tokoin.owner,
      holder: tokoin.holder,
      status: spent ? "spent" : event.op === "redeem" ? "in_redemption" : "valid",
      policy: tokoin.policy,
    });
  }
}

export interface RoleGroups {
  owned: CoinView[];
  held: CoinView[];
  subjectOf: CoinView[];
}

export function groupByRole(state: ConsoleState): RoleGroups {
  const owned: CoinView[] = [];
  const held: CoinView[] = [];
  const subjectOf: CoinView[] = [];
  for (const coin of state.coins.values()) {
    if (coin.owner === state.me) owned.push(coin);
    if (coin.holder === state.me && coin.status !== "spent") held.push(coin);
    if (state.witnesses.has(coin.cid)) subjectOf.push(coin);
  }
  const byId = (a: CoinView, b: CoinView) => a.cid.localeCompare(b.cid);
  return { owned: owned.sort(byId), held: held.sort(byId), subjectOf: subjectOf.sort(byId) };
}

export function markOffline(state: ConsoleState): void {
  state.offline = true; // cached views stay; the banner goes up
}

export function markOnline(state: ConsoleState): void {
  state.offline = false;
}
