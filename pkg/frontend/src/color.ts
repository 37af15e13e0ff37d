/**
 * Point coloring for the projection scatter.
 *
 * All functions are pure: they map (point, mode, context) to a CSS color
 * string, so a re-render from the same server data and view state always
 * produces the same pixels. The context object carries the lookups a mode
 * needs (time range, condition order, annotation values).
 */

import type { MetaInfo, PointKey, ProjectionPoint } from "./api.js";

export type ColorMode = "time" | "condition" | "annotation" | "prediction";

export const COLOR_MODES: ColorMode[] = [
	"time",
	"condition",
	"annotation",
	"prediction",
];

export interface LegendEntry {
	/** Text shown next to the swatch. */
	label: string;
	/** CSS color of the swatch. */
	color: string;
}

/** Lookups shared by every color mode. */
export interface ColorContext {
	/** Inclusive time range of the loaded points, in minutes. */
	tMin: number;
	tMax: number;
	/** Condition names in stable (sorted) order. */
	conditions: string[];
	/** Label type whose annotations drive the annotation mode. */
	labelType: string;
	/** Human annotation value per point for that label type. */
	annotationOf: Map<PointKey, number>;
}

/** Color for an unlabeled/unpredicted point. */
export const NEUTRAL = "#b8b8b8";

/** Negative (0) and positive (1) class colors, shared by labels and predictions. */
export const CLASS_COLORS = ["#3b6fb6", "#d0381f"];

/** Categorical palette for conditions. */
const CATEGORY10 = [
	"#1f77b4",
	"#ff7f0e",
	"#2ca02c",
	"#d62728",
	"#9467bd",
	"#8c564b",
	"#e377c2",
	"#7f7f7f",
	"#bcbd22",
	"#17becf",
];

// Five anchors of a dark-blue-to-yellow ramp, interpolated linearly.
const RAMP: [number, number, number][] = [
	[68, 1, 84],
	[59, 82, 139],
	[33, 145, 140],
	[94, 201, 98],
	[253, 231, 37],
];

/** Continuous colormap: t in [0, 1] to a CSS rgb() string. */
export function colorRamp(t: number): string {
	const clamped = Math.min(1, Math.max(0, t));
	const pos = clamped * (RAMP.length - 1);
	const i = Math.min(RAMP.length - 2, Math.floor(pos));
	const frac = pos - i;
	const [r0, g0, b0] = RAMP[i];
	const [r1, g1, b1] = RAMP[i + 1];
	const r = Math.round(r0 + (r1 - r0) * frac);
	const g = Math.round(g0 + (g1 - g0) * frac);
	const b = Math.round(b0 + (b1 - b0) * frac);
	return `rgb(${r},${g},${b})`;
}

/** Palette color for the i-th condition. */
export function conditionColor(index: number): string {
	return CATEGORY10[index % CATEGORY10.length];
}

/** Build the shared color context from loaded points and view state. */
export function makeColorContext(
	points: ProjectionPoint[],
	labelType: string,
	annotationOf: Map<PointKey, number>,
): ColorContext {
	let tMin = Infinity;
	let tMax = -Infinity;
	const conditions = new Set<string>();
	for (const p of points) {
		if (p.hpi_minutes < tMin) tMin = p.hpi_minutes;
		if (p.hpi_minutes > tMax) tMax = p.hpi_minutes;
		conditions.add(p.condition);
	}
	if (!isFinite(tMin)) {
		tMin = 0;
		tMax = 0;
	}
	return {
		tMin,
		tMax,
		conditions: Array.from(conditions).sort(),
		labelType,
		annotationOf,
	};
}

/** CSS color of one point under the given mode. */
export function pointColor(
	point: ProjectionPoint,
	key: PointKey,
	mode: ColorMode,
	ctx: ColorContext,
): string {
	switch (mode) {
		case "time": {
			const span = ctx.tMax - ctx.tMin;
			return colorRamp(span > 0 ? (point.hpi_minutes - ctx.tMin) / span : 0);
		}
		case "condition":
			return conditionColor(ctx.conditions.indexOf(point.condition));
		case "annotation": {
			const value = ctx.annotationOf.get(key);
			return value === undefined ? NEUTRAL : CLASS_COLORS[value] ?? NEUTRAL;
		}
		case "prediction":
			return point.predicted_label === null
				? NEUTRAL
				: CLASS_COLORS[point.predicted_label] ?? NEUTRAL;
	}
}

/** Legend rows matching what pointColor does in the given mode. */
export function legendFor(mode: ColorMode, ctx: ColorContext): LegendEntry[] {
	switch (mode) {
		case "time":
			return [
				{ label: `${(ctx.tMin / 60).toFixed(1)} h`, color: colorRamp(0) },
				{ label: "mid", color: colorRamp(0.5) },
				{ label: `${(ctx.tMax / 60).toFixed(1)} h`, color: colorRamp(1) },
			];
		case "condition":
			return ctx.conditions.map((name, i) => ({
				label: name,
				color: conditionColor(i),
			}));
		case "annotation":
			return [
				{ label: `${ctx.labelType} = 0`, color: CLASS_COLORS[0] },
				{ label: `${ctx.labelType} = 1`, color: CLASS_COLORS[1] },
				{ label: "unlabeled", color: NEUTRAL },
			];
		case "prediction":
			return [
				{ label: "predicted 0", color: CLASS_COLORS[0] },
				{ label: "predicted 1", color: CLASS_COLORS[1] },
			];
	}
}

/** Whether a mode can be offered, and if not, why (shown as a tooltip). */
export function modeAvailability(
	mode: ColorMode,
	meta: MetaInfo,
): { enabled: boolean; reason?: string } {
	if (mode === "prediction" && !meta.has_predictions) {
		return {
			enabled: false,
			reason: "no predictions loaded; start the service with --predictions",
		};
	}
	return { enabled: true };
}
